"""Long-range terrain elevation map prediction from multi-camera views.

A numpy library implementing the full pipeline: map-space geometry and
ego-motion alignment, camera ray unprojection for orientation-aware
positional encodings, a synthetic off-road world for data, a cross-view
attention model with history-augmented map queries, the four-term
training loss, and evaluation metrics.
"""

from .config import RunConfig
from .errors import ConfigurationError, DatasetError, GenerationError, TrainingError
from .mapspace import (
    ElevationMap,
    GridSpec,
    OverlapMask,
    VehiclePose,
    align_previous,
    load_elevation_map,
    masked_history,
    relative_se2z,
    save_elevation_map,
)
from .camera import (
    CameraExtrinsics,
    CameraIntrinsics,
    CameraRig,
    default_rig,
    feature_grid_pixels,
    load_rig,
    project_to_image,
    save_rig,
    unproject_direction,
    unproject_directions,
)
from .synthworld import (
    Dataset,
    FrameSample,
    TerrainField,
    crop_gt_map,
    generate_sequence,
    generate_terrain,
    read_dataset,
    render_views,
    simulate_trajectory,
    write_dataset,
)
from .model import ElevationNet, pool_masked_history
from .objective import LossWeights, loss_grad, loss_recons, loss_tc, loss_total, loss_tv
from .evalkit import EvalReport, default_bands, frustum_mask, mae_banded, mtc, sdr
from .harness import Adam, TrainResult, evaluate, load_checkpoint, run_ablation, save_checkpoint, train

__version__ = "0.1.0"
