"""Direct sparse convolution with pruning and quantization."""

from ._dsconv import (
    ArgumentError,
    Error,
    FormatError,
    InvariantError,
    ShapeError,
    bench_preset_layer,
    build_codebook,
    build_csr,
    conv_dense_direct,
    conv_dense_gemm,
    conv_sparse,
    fit_fixed_point,
    infer,
    load_tensor,
    model_summary,
    output_shape,
    preset_layers,
    preset_names,
    prune,
    quantize_fixed,
    save_tensor,
)

__all__ = [
    "ArgumentError",
    "Error",
    "FormatError",
    "InvariantError",
    "ShapeError",
    "bench_preset_layer",
    "build_codebook",
    "build_csr",
    "conv_dense_direct",
    "conv_dense_gemm",
    "conv_sparse",
    "fit_fixed_point",
    "infer",
    "load_tensor",
    "model_summary",
    "output_shape",
    "preset_layers",
    "preset_names",
    "prune",
    "quantize_fixed",
    "save_tensor",
]
