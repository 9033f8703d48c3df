//! Bit-exact storage: index packing, layer encoding, the model container and
//! storage reports.

pub mod bitpack;
pub mod layer;
pub mod model;
pub mod report;

pub use bitpack::{pack_indices, unpack_indices, BitStream, BitWriter};
pub use layer::{
    decode_layer, decode_levels, encode_layer, EncodedLayer, LayerFormat, NormalizerParams,
};
pub use model::{ModelFile, ModelMetadata, TableCache, FORMAT_VERSION, MAGIC};
pub use report::{
    layouts_of, storage_report, vgg9_layouts, LayerLayout, LayerStorage, ReportOptions,
    StorageReport,
};
