//! Data sources: synthetic benchmark generators, MNIST IDX files, CSV tables.

mod csv_table;
mod mnist;
mod synthetic;

pub use csv_table::{load_csv_regression, CsvRegression};
pub use mnist::{
    encode_idx_images, encode_idx_labels, load_mnist_idx, make_colored_mnist, parse_idx_images, parse_idx_labels,
    ColoredMnistConfig, MnistRaw,
};
pub use synthetic::{
    gen_example41, gen_selection_bias, gen_spurious_classification, random_orthogonal, selection_probability,
    Example41, Scramble, SelBiasConfig, SpuriousClsConfig,
};
