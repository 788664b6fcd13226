"""Glue from a capture (rendered or on disk) to feature tracks and a reconstruction."""

from __future__ import annotations

from ..geometry import CAMERA, Intrinsics
from ..structured_light import FeatureSet, GrayCodeSpec, decode, extract_features
from .reconstruction import ReconstructionLog, ReconstructionState, SfMConfig, reconstruct, set_metric_scale
from .tracks import TrackSet, build_tracks


def capture_features(
    capture, threshold_mode: str = "inverse", contrast_floor: float = 0.05, max_support: int = 64
) -> dict[tuple[str, str], FeatureSet]:
    """Decode every pair's pattern stack and extract code centroids."""
    manifest = capture.manifest
    spec = GrayCodeSpec(**manifest["gray_code"])
    out = {}
    for k, pair in enumerate(manifest["pairs"]):
        codes = decode(capture.pattern_stack(k), spec, threshold_mode, contrast_floor)
        out[(pair["projector"], pair["camera"])] = extract_features(codes, max_support)
    return out


def manifest_intrinsics(manifest) -> dict[str, Intrinsics]:
    return {d["id"]: Intrinsics(**d["intrinsics"]) for d in manifest["devices"]}


def default_init_pair(manifest, camera_only: bool = False) -> tuple[str, str]:
    """First capture pair as (camera, projector); first two cameras without projectors."""
    if camera_only:
        cams = []
        for p in manifest["pairs"]:
            if p["camera"] not in cams:
                cams.append(p["camera"])
        if len(cams) < 2:
            raise ValueError("camera-only reconstruction needs at least two cameras")
        return cams[0], cams[1]
    first = manifest["pairs"][0]
    return first["camera"], first["projector"]


def reconstruct_capture(
    capture,
    config: SfMConfig | None = None,
    camera_only: bool = False,
    merge_threshold_px: float = 0.5,
    features=None,
) -> tuple[ReconstructionState, ReconstructionLog, TrackSet]:
    """Decode, build tracks and run incremental SfM on a capture.

    The metric scale is recorded from the manifest's ``scale_reference``
    (known distance between two devices) when both are registered.
    """
    config = config or SfMConfig()
    manifest = capture.manifest
    features = features if features is not None else capture_features(capture)
    tracks = build_tracks(features, merge_threshold_px, camera_only=camera_only)
    state, logbook = reconstruct(tracks, manifest_intrinsics(manifest), default_init_pair(manifest, camera_only), config)
    ref = manifest.get("scale_reference")
    if ref:
        set_metric_scale(state, ref["a"], ref["b"], ref["distance"])
    return state, logbook, tracks
