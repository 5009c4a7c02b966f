"""Synthetic warped-document generation."""

from docdewarp.synth.dataset import (
    DatasetItem,
    GenerationConfig,
    generate_sample,
    generate_samples,
    read_dataset,
    replay,
    write_dataset,
)
from docdewarp.synth.mesh import (
    Perturbation,
    SparseMesh,
    WarpSpec,
    curve_kernel,
    densify,
    fold_kernel,
    perturb_mesh,
)
from docdewarp.synth.pages import synthetic_page, synthetic_texture
from docdewarp.synth.render import (
    DocumentSample,
    edge_ground_truth,
    reconstruct,
    reconstruction_ssim,
    synthesize_sample,
)

__all__ = [
    "DatasetItem", "DocumentSample", "GenerationConfig", "Perturbation", "SparseMesh", "WarpSpec",
    "curve_kernel", "densify", "edge_ground_truth", "fold_kernel", "generate_sample", "generate_samples",
    "perturb_mesh", "read_dataset", "reconstruct", "reconstruction_ssim", "replay", "synthesize_sample",
    "synthetic_page", "synthetic_texture", "write_dataset",
]
