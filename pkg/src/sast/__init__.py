"""Scene-adaptive sparse window transformer for event-camera voxels."""
from ._backend import kernel_backend, numeric_mode, use_kernels, use_numeric
from .backbone import BackboneConfig, SastBackbone, sast_backbone
from .events import SceneSpec, parse_events, read_events, synth_scene, voxelize

__all__ = [
    "BackboneConfig", "SastBackbone", "SceneSpec", "kernel_backend", "numeric_mode", "parse_events",
    "read_events", "sast_backbone", "synth_scene", "use_kernels", "use_numeric", "voxelize",
]
__version__ = "0.1.0"
