//! CSV ingestion, model files and the `mesurv` command line on top of
//! `mesurv-core`.

pub mod cli;
pub mod io;
pub mod model_file;

pub use io::{load_csv, read_frame, write_dataset};
pub use model_file::{ModelFile, ModelFileError, FORMAT_VERSION};
