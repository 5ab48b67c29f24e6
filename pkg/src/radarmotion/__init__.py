"""Radar motion understanding: ego-velocity estimation and moving-object
segmentation on 4D radar point clouds, with a self-contained autodiff
engine, classical baselines, and a synthetic scene simulator."""

from .autodiff import Adam, LrSchedule, Parameter, Tensor, grad_check
from .geometry import (
    RadarFrame,
    RadarPoint,
    ball_query_sample,
    farthest_point_sample,
    interval_sample,
    knn,
    radial_projection,
    random_subsample,
    velocity_compensate,
)
from .network import (
    EveConfig,
    EveModel,
    MosConfig,
    MosModel,
    doppler_loss,
    eve_loss,
    load_model,
    mos_loss,
    predict_pipeline,
    save_model,
)
from .simulate import (
    LabeledSequence,
    SceneConfig,
    read_sequence,
    simulate_sequence,
    split_dataset,
    write_sequence,
)
from .baselines import IcpConfig, RansacConfig, icp_velocity, ransac_eve, threshold_mos
from .metrics import MetricsReport, compute_eve_metrics, compute_mos_metrics

__version__ = "0.1.0"
