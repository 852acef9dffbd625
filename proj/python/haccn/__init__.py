"""Python front end for the haccn crowd-counting core."""

from ._haccn import (
    Diverged,
    InvalidArgument,
    InvalidData,
    IoError,
    Model,
    Params,
    aggregate,
    density_class,
    downsample_density_map,
    generate_density_map,
    load_checkpoint,
    mae,
    mse,
    pseudo_gt,
    read_dmap,
    save_checkpoint,
    segmentation_mask,
    synth_scene,
    train_synthetic,
    write_dmap,
)

__all__ = [
    "Diverged",
    "InvalidArgument",
    "InvalidData",
    "IoError",
    "Model",
    "Params",
    "aggregate",
    "density_class",
    "downsample_density_map",
    "generate_density_map",
    "load_checkpoint",
    "mae",
    "mse",
    "pseudo_gt",
    "read_dmap",
    "save_checkpoint",
    "segmentation_mask",
    "synth_scene",
    "train_synthetic",
    "write_dmap",
]
