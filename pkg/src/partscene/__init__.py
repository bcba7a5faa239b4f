"""partscene: part-annotated synthetic indoor scenes and open-vocabulary
3D part segmentation via multi-view mask lifting."""

from .config import PipelineConfig
from .evaluation import EvalReport, Prediction, evaluate, point_iou
from .geometry import AABB, AnnotatedCloud, PlacementTransform, TriMesh
from .grouping import (PartInstance3D, PipelineSettings, ScenePipeline,
                       SuperpointScore, segment_scene)
from .render import Camera, GridDecomposition, ViewBundle
from .segmenter import Mask2D, SegmenterBackend
from .superpoints import SuperpointPartition, compute_superpoints
from .synth import (Layout, QuerySpec, SceneData, SceneManifest, ShapeRecord,
                    generate_scene, load_scene, load_shape_library)

__version__ = "0.1.0"

__all__ = [
    "AABB", "AnnotatedCloud", "Camera", "EvalReport", "GridDecomposition",
    "Layout", "Mask2D", "PartInstance3D", "PipelineConfig", "PipelineSettings",
    "PlacementTransform", "Prediction", "QuerySpec", "SceneData",
    "SceneManifest", "ScenePipeline", "SegmenterBackend", "ShapeRecord",
    "SuperpointPartition", "SuperpointScore", "TriMesh", "ViewBundle",
    "compute_superpoints", "evaluate", "generate_scene", "load_scene",
    "load_shape_library", "point_iou", "segment_scene",
]
