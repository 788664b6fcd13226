"""Correspondence graph, incremental SfM and projector-weighted bundle adjustment."""

from .align import align_similarity, pose_errors, rotation_angle, transform_pose
from .bundle import BAProblem, levenberg_marquardt, observation_jacobians, project_observations
from .reconstruction import (
    ReconstructionState,
    SfMConfig,
    bundle_adjust,
    device_weight,
    initialize_pair,
    reconstruct,
    register_view,
    triangulate_tracks,
)
from .pipeline import capture_features, reconstruct_capture
from .tracks import FeatureTrack, Observation, TrackSet, build_tracks

__all__ = [
    "BAProblem",
    "FeatureTrack",
    "Observation",
    "ReconstructionState",
    "SfMConfig",
    "TrackSet",
    "align_similarity",
    "build_tracks",
    "bundle_adjust",
    "capture_features",
    "device_weight",
    "initialize_pair",
    "levenberg_marquardt",
    "observation_jacobians",
    "pose_errors",
    "project_observations",
    "reconstruct",
    "reconstruct_capture",
    "register_view",
    "rotation_angle",
    "transform_pose",
    "triangulate_tracks",
]
