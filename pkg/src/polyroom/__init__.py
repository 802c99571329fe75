"""Desk-scale vectorized floorplan reconstruction from density maps."""

from .dataio import (
    DensityMap,
    InstanceMasks,
    PointCloud,
    SceneRecord,
    SynthConfig,
    generate_scene,
    load_scene,
    project_density,
    save_scene,
)
from .errors import PolyroomError
from .evaluation import EvalConfig, MetricsReport, evaluate
from .extraction import ExtractionConfig, VectorFloorplan, extract_floorplan
from .geometry import (
    Floorplan,
    Point2,
    Polygon,
    angle_cosine,
    dp_simplify,
    ensure_clockwise,
    perimeter,
    polygon_iou,
    signed_area,
)
from .model import DecoderOutput, FloorplanModel, ModelConfig
from .queryinit import RoomQueries, init_queries, mask_to_polygon
from .representation import (
    LabeledVertex,
    RoomSequence,
    SampledFloorplan,
    normalize_start,
    sequence_to_polygon,
    snap_corners,
    uniform_sample,
)
from .training import (
    Adam,
    LossWeights,
    MatchResult,
    TrainConfig,
    load_checkpoint,
    match_rooms,
    pair_cost,
    save_checkpoint,
    total_loss,
    train,
)

__version__ = "0.1.0"
