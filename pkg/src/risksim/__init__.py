"""Risk-adjustable multi-agent traffic scene generation.

A conditional diffusion sampler over joint vehicle trajectories, a
post-encroachment-time risk criterion for conditioning and labeling, a
motion-token dynamics check, and a closed-loop episode simulator with
safety and realism metrics.
"""

from .scene import (
    DEFAULT_DIMS,
    EntryZone,
    JointTrajectory,
    Recording,
    RiskLevel,
    SceneConfig,
    SchemaError,
    Trajectory,
    VehicleDims,
    VehicleState,
    heading_to_vec,
    read_trajectory_csv,
    slice_window,
    validate_joint,
    vec_to_heading,
    write_trajectory_csv,
)
from .geometry import (
    GridSpec,
    OrientedBox,
    box_corners,
    boxes_overlap,
    corner_distance,
    grid_from_bounds,
    rasterize_box,
)
from .safety import (
    Histogram,
    MetricSource,
    OccupancyEvent,
    PetResult,
    RiskParams,
    detect_collisions,
    occupancy_intervals,
    realism_report,
    risk_from_pet,
    scene_pet,
    wasserstein,
    window_pet_values,
)
from .vocab import (
    KDisksParams,
    MotionToken,
    Vocabulary,
    apply_token,
    build_vocabulary,
    dynamics_check,
    extract_transitions,
    load_vocabulary,
    nearest_token,
    save_vocabulary,
)
from .diffusion import (
    AnalyticGaussianPredictor,
    DivergenceError,
    NoisePredictor,
    NoiseSchedule,
    WindowCodec,
    SamplerConfig,
    ToyPredictor,
    TrainingConfig,
    analytic_eps,
    denoise_step,
    fit_codec,
    forward_noise,
    guided_noise,
    label_dataset,
    load_model,
    make_schedule,
    sample,
    save_model,
    train,
    training_loss,
)
from .simulate import (
    EpisodeConfig,
    EpisodeLog,
    run_episode,
    run_experiment,
    spawn_arrivals,
    two_proportion_one_sided,
    volume_multiplier,
)
from .synthetic import SyntheticWorldParams, generate_recording, roundabout_scene

__version__ = "0.1.0"
