//! Station data: CSV schema and ingestion, synthetic generation, and the
//! train/test split.

pub mod csv_io;
pub mod schema;
pub mod split;
pub mod synthetic;

pub use csv_io::{parse_station_csv, parse_station_reader, write_station_csv, write_station_csv_file, ParsedCsv};
pub use schema::*;
pub use split::{split, Split, SplitSpec};
pub use synthetic::{dataset_hash, generate_synthetic, Manifest, SyntheticConfig, SyntheticData, TruthSeries};
