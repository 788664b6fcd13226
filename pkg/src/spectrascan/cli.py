"""Command-line driver: ``spectrascan {synth,reconstruct,spectra,relight,bandselect,eval}``.

Exit codes: 0 success, 2 usage or configuration problem, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import load_config
from .errors import ConfigurationError, DegenerateGeometryError, InitializationError, OptimizationError, RegistrationError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("spectrascan")


class UsageError(Exception):
    """Bad arguments or inputs detected after parsing."""


# --- helpers ----------------------------------------------------------------------


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _parse_k(text: str) -> list[int]:
    ks: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            ks.extend(range(int(a), int(b) + 1))
        elif part:
            ks.append(int(part))
    return ks


def _load_capture(path):
    from .synth import DiskCapture

    path = Path(path)
    if not (path / "manifest.json").exists():
        raise UsageError(f"{path} is not a capture directory (no manifest.json)")
    return DiskCapture(path)


def _load_recon(path):
    from .recon_io import load_reconstruction

    path = Path(path)
    target = path / "reconstruction.json" if path.is_dir() else path
    if not target.exists():
        raise UsageError(f"reconstruction not found: {target}")
    return load_reconstruction(target)


def _manifest_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, default=float))


# --- subcommands ------------------------------------------------------------------


def cmd_synth(args, cfg) -> int:
    from .synth import build_scene, render_capture, write_capture

    overrides = _parse_set(args.set)
    overrides.setdefault("seed", cfg["seed"])
    g = cfg["grid"]
    overrides.setdefault("grid", (g["start_nm"], g["step_nm"], g["count"]))
    if args.noise is not None:
        overrides["noise_sigma"] = args.noise
    try:
        scene = build_scene(args.preset, overrides)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    manifest = write_capture(render_capture(scene), args.out)
    print(f"wrote {args.preset} capture to {args.out}: {len(scene.pairs)} pairs, {len(scene.views)} devices")
    if args.preset == "colorchart":
        print(f"chart patches: {len(scene.info['patches'])}")
    print(f"manifest sha256 {_manifest_hash(manifest)}")
    return EXIT_OK


def cmd_reconstruct(args, cfg) -> int:
    from .recon_io import save_reconstruction
    from .sfm import SfMConfig, capture_features, reconstruct_capture

    capture = _load_capture(args.capture)
    sfm_cfg = SfMConfig(
        w_p=cfg["w_p"],
        refine_intrinsics=cfg["refine_intrinsics"],
        huber_px=cfg["huber_px"],
        ransac_threshold_px=cfg["ransac_threshold_px"],
        pnp_threshold_px=cfg["pnp_threshold_px"],
        gate_px=cfg["gate_px"],
        seed=cfg["seed"],
    )
    t0 = time.perf_counter()
    features = capture_features(capture, contrast_floor=cfg["contrast_floor"], max_support=cfg["max_support"])
    state, logbook, tracks = reconstruct_capture(
        capture, sfm_cfg, camera_only=args.camera_only_tracks, merge_threshold_px=cfg["merge_threshold_px"], features=features
    )
    out = save_reconstruction(args.out, state, tracks, logbook, extra={"camera_only_tracks": bool(args.camera_only_tracks)})
    print(f"tracks: {len(tracks)}")
    print(f"points: {state.n_points}")
    print(f"registered views: {len(state.registered)} ({', '.join(state.registered)})")
    if logbook.skipped:
        print(f"skipped views: {', '.join(logbook.skipped)}")
    print(f"final weighted cost: {state.weighted_cost():.6g}")
    print(f"rms reprojection error: {state.rms_error():.4g} px")
    print(f"wrote {out} in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


def _spectral_points(capture, recon, cfg, mesh_path=None, exclude_pairs=()):
    from .plyio import read_mesh
    from .spectra import prepare_points

    manifest = capture.manifest
    pairs = [(p["projector"], p["camera"]) for p in manifest["pairs"]]
    mesh = read_mesh(mesh_path) if mesh_path else None
    if len(recon.points) == 0:
        from .spectra import SpectralPoints

        return SpectralPoints(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, np.int64), [], {}, []), pairs
    return (
        prepare_points(
            recon.points,
            recon.views,
            pairs,
            recon.tracks,
            recon.track_ids,
            mesh=mesh,
            eps=cfg["visibility_eps"],
            exclude_pairs=exclude_pairs,
        ),
        pairs,
    )


def cmd_spectra(args, cfg) -> int:
    from .datasets import default_basis
    from .spectra import estimate_baseline, estimate_spectra, export_spectra, spectral_assets

    capture = _load_capture(args.capture)
    recon = _load_recon(args.reconstruction)
    grid, illum, sens = spectral_assets(capture.manifest)
    basis = default_basis(grid, cfg["n_basis"])
    sp, pairs = _spectral_points(capture, recon, cfg, args.mesh, args.exclude_pair or ())
    if args.baseline is not None:
        if not 0 <= args.baseline < len(pairs):
            raise UsageError(f"--baseline pair index must be in [0, {len(pairs) - 1}]")
        sp.estimates = estimate_baseline(sp, capture.color_images, args.baseline, basis, illum, sens, cfg["gamma"])
        mode = f"baseline (pair {args.baseline}, shading ignored)"
    else:
        estimate_spectra(sp, capture.color_images, basis, illum, sens, cfg["gamma"], workers=cfg["threads"])
        mode = "shading-aware"
    white = illum.illuminant(illum.index("white")) if "white" in illum.names else None
    summary = export_spectra(args.out, sp, grid, white)
    print(f"mode: {mode}")
    print(f"points: {summary['n_points']}, estimated: {summary['n_estimated']}, unestimated: {summary['n_unestimated']}")
    hist = summary["residual_histogram"]
    if hist["counts"]:
        print("residual histogram:")
        for c, lo, hi in zip(hist["counts"], hist["edges"][:-1], hist["edges"][1:]):
            print(f"  [{lo:.3e}, {hi:.3e}) {c}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _light_spectrum(spec: str, grid, capture_manifest):
    from .spectral_model import SpectralCurve, read_curve_csv

    if spec == "flat":
        return SpectralCurve.constant(grid, 1.0)
    if capture_manifest is not None and spec in capture_manifest["illuminant_names"]:
        i = capture_manifest["illuminant_names"].index(spec)
        return SpectralCurve(grid, np.asarray(capture_manifest["illuminants"][i], float))
    path = Path(spec)
    if path.exists():
        return read_curve_csv(path, grid)
    raise UsageError(f"unknown light spectrum {spec!r}: use 'flat', a capture illuminant name or a CSV file")


def cmd_relight(args, cfg) -> int:
    from .geometry import CAMERA, DeviceView, Intrinsics, Pose
    from .imageio import read_json, write_pfm
    from .plyio import read_points, stacked
    from .relight import Light, relight
    from .spectral_model import SensitivityMatrix, WavelengthGrid

    if not args.light:
        raise UsageError("at least one --light is required")
    spath = Path(args.spectra)
    ply = spath / "spectra.ply" if spath.is_dir() else spath
    if not ply.exists():
        raise UsageError(f"spectral point cloud not found: {ply}")
    data = read_points(ply)
    summary_path = ply.parent / "summary.json"
    grid = WavelengthGrid(**read_json(summary_path)["grid"]) if summary_path.exists() else None
    refl = stacked(data, "reflectance")
    if grid is None:
        grid = WavelengthGrid(cfg["grid"]["start_nm"], cfg["grid"]["step_nm"], refl.shape[1])
    est = data.get("estimated")
    if est is not None:
        refl = np.where(est[:, None] > 0.5, refl, np.nan)
    manifest = _load_capture(args.capture).manifest if args.capture else None
    if manifest is not None:
        sens = SensitivityMatrix(grid, np.asarray(manifest["sensitivity"], float))
    else:
        from .datasets import load_camera_sensitivity

        sens = load_camera_sensitivity(grid)
    lights = []
    for x, y, z, spec in args.light:
        lights.append(Light(np.array([float(x), float(y), float(z)]), _light_spectrum(spec, grid, manifest), at_infinity=args.light_at_infinity))
    if args.reconstruction and args.view:
        recon = _load_recon(args.reconstruction)
        if args.view not in recon.views:
            raise UsageError(f"view {args.view!r} is not in the reconstruction")
        view = recon.views[args.view]
    else:
        pts = data["points"]
        c = pts.mean(axis=0)
        eye = np.asarray(args.eye, float) if args.eye else c + np.array([0.0, -2.0, 1.0]) * np.linalg.norm(pts.max(0) - pts.min(0))
        view = DeviceView("relight", CAMERA, Intrinsics.centered(800.0, 640, 480), Pose.look_at(eye, c))
    img, mask, _ = relight(data["points"], data["normals"], refl, lights, view, sens, shadows=not args.no_shadows)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pfm(out, img.astype(np.float32))
    print(f"rendered {int(mask.sum())} pixels from {len(refl)} points under {len(lights)} light(s) to {out}")
    return EXIT_OK


def cmd_bandselect(args, cfg) -> int:
    from .datasets import default_basis
    from .evaluate import assign_patches, track_truth_points, align_points
    from .imageio import write_json
    from .spectra import estimate_spectra, point_statistics, pooled_statistics, spectral_assets
    from .spectral_solver import SpectralProblem, select_bands, solve_from_statistics, subset_rmse
    from .synth import load_ground_truth

    capture = _load_capture(args.capture)
    recon = _load_recon(args.reconstruction)
    grid, illum, sens = spectral_assets(capture.manifest)
    ne = 3 * len(illum)
    ks = _parse_k(args.k)
    if not ks or any(not 1 <= k <= ne for k in ks):
        raise UsageError(f"k values must lie in [1, {ne}]")
    gt_dir = Path(args.capture) / "ground_truth"
    if not gt_dir.exists():
        raise UsageError("band selection needs the capture's ground_truth sidecar")
    truth = load_ground_truth(gt_dir)
    patches = {int(k): v for k, v in truth["info"].get("patches", {}).items()}
    if not patches:
        raise UsageError("band selection needs a colour-chart capture")
    basis = default_basis(grid, cfg["n_basis"])
    sp, _ = _spectral_points(capture, recon, cfg)
    estimate_spectra(sp, capture.color_images, basis, illum, sens, cfg["gamma"], workers=cfg["threads"])
    truth_pts = track_truth_points(recon.tracks, recon.track_ids, truth["views"], truth["mesh"])
    s, R, t = align_points(recon.points, truth_pts)
    labels = assign_patches(s * recon.points @ R.T + t, patches)
    W, Z, used = point_statistics(sp, ne)
    n_patch = len(patches)
    Wp, Zp = pooled_statistics(W, Z, used, labels, n_patch)
    mats = truth["info"]["patch_materials"]
    T = truth["reflectances"][mats]
    problem = SpectralProblem(basis, illum, sens, cfg["gamma"])
    alpha, _ = solve_from_statistics(problem, Wp, Zp)
    full_rmse = float(np.mean(np.sqrt(np.mean((alpha @ basis.basis.T + basis.mean - T) ** 2, axis=1))))
    rows = []
    for k in ks:
        t0 = time.perf_counter()
        subset, rmse = select_bands(problem, Wp, Zp, T, k)
        check = subset_rmse(problem, Wp, Zp, T, subset)
        names = [f"{illum.names[b // 3]}:{'RGB'[b % 3]}" for b in subset]
        rows.append({"k": k, "rmse": rmse, "subset": list(subset), "bands": names, "recheck_rmse": check, "seconds": time.perf_counter() - t0})
        print(f"k={k:2d} rmse={rmse:.6f} bands={','.join(names)}")
    for a, b in zip(rows, rows[1:]):
        if b["k"] > a["k"] and b["rmse"] > a["rmse"] * (1 + 1e-9):
            print(f"warning: best RMSE rose from k={a['k']} to k={b['k']}", file=sys.stderr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "bandselect.json", {"full_rmse": full_rmse, "gamma": cfg["gamma"], "results": rows})
    with open(out / "bandselect.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "rmse", "subset"])
        for r in rows:
            w.writerow([r["k"], f"{r['rmse']:.8g}", " ".join(map(str, r["subset"]))])
    print(f"all-bands rmse={full_rmse:.6f}; wrote {out}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    from .evaluate import assign_patches, geometry_report, patch_rmse
    from .imageio import read_json, write_json
    from .plyio import read_points, stacked
    from .synth import load_ground_truth

    recon = _load_recon(args.reconstruction)
    gt_dir = Path(args.capture) / "ground_truth"
    if not gt_dir.exists():
        raise UsageError(f"no ground truth under {gt_dir}")
    truth = load_ground_truth(gt_dir)
    report = geometry_report(recon.views, recon.points, recon.track_ids, recon.tracks, truth["views"], truth["mesh"])
    views = report.pop("views")
    print(f"points: {report['n_points']}  views: {report['n_views']}")
    print(f"point error (bbox-diagonal units): rms {report['point_rms']:.3e}  max {report['point_max']:.3e}")
    print(f"pose error: rotation max {report['rotation_max']:.3e} rad  translation max {report['translation_max']:.3e}")
    report["views"] = views
    patches = {int(k): v for k, v in truth["info"].get("patches", {}).items()}
    if args.spectra and patches:
        data = read_points(Path(args.spectra) / "spectra.ply")
        refl = stacked(data, "reflectance")
        est = data.get("estimated")
        if est is not None:
            refl = np.where(est[:, None] > 0.5, refl, np.nan)
        sim = report["similarity"]
        moved = sim["scale"] * data["points"] @ np.asarray(sim["rotation"]).T + np.asarray(sim["translation"])
        labels = assign_patches(moved, patches)
        T = truth["reflectances"][truth["info"]["patch_materials"]]
        rm = patch_rmse(refl, labels, T)
        names = [truth["material_names"][m] for m in truth["info"]["patch_materials"]]
        print("patch RMSE (4 x 6 chart layout):")
        for r in range(4):
            print("  " + "  ".join(f"{rm[r * 6 + c]:.4f}" for c in range(6)))
        report["patch_rmse"] = {n: float(v) for n, v in zip(names, rm)}
        report["patch_rmse_mean"] = float(np.nanmean(rm))
        print(f"mean patch RMSE {report['patch_rmse_mean']:.4f}")
    elif args.spectra:
        summary = read_json(Path(args.spectra) / "summary.json")
        report["spectra"] = {k: summary[k] for k in ("n_points", "n_estimated", "n_unestimated")}
    if args.out:
        write_json(args.out, report)
        print(f"wrote {args.out}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file (flags override it)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="spectrascan", description="Structured-light SfM and spectral reflectance pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic capture with ground truth")
    s.add_argument("--preset", required=True, help="colorchart, blob or sphere")
    s.add_argument("--out", required=True)
    s.add_argument("--noise", type=float, default=None, help="Gaussian pixel noise sigma")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="scene override (JSON value)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("reconstruct", parents=[common], help="decode, build tracks, incremental SfM")
    s.add_argument("capture")
    s.add_argument("--out", required=True)
    s.add_argument("--w-p", dest="w_p", type=float, default=None, help="projector observation weight (default 100)")
    s.add_argument("--camera-only-tracks", action="store_true", help="drop projector observations from tracks")
    s.add_argument("--huber", dest="huber_px", type=float, default=None, help="Huber threshold in pixels")
    s.add_argument("--merge-threshold", dest="merge_threshold_px", type=float, default=None)
    s.add_argument("--no-refine-intrinsics", dest="refine_intrinsics", action="store_false", default=None)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("spectra", parents=[common], help="per-point spectral reflectance")
    s.add_argument("capture")
    s.add_argument("reconstruction")
    s.add_argument("--out", required=True)
    s.add_argument("--gamma", type=float, default=None, help="smoothness weight (default 0.06)")
    s.add_argument("--n-basis", dest="n_basis", type=int, default=None)
    s.add_argument("--baseline", type=int, default=None, metavar="PAIR", help="shading-ignoring estimate from one pair")
    s.add_argument("--mesh", default=None, help="PLY mesh (same frame as the reconstruction) for visibility")
    s.add_argument("--exclude-pair", type=int, action="append", help="leave a pair out (e.g. for hold-out checks)")
    s.set_defaults(func=cmd_spectra)

    s = sub.add_parser("relight", parents=[common], help="render the spectral model under new lights")
    s.add_argument("spectra", help="spectra directory or spectra.ply")
    s.add_argument("--light", nargs=4, action="append", metavar=("X", "Y", "Z", "SPECTRUM"))
    s.add_argument("--light-at-infinity", action="store_true", help="treat light positions as directions")
    s.add_argument("--capture", default=None, help="capture for illuminant names and camera sensitivity")
    s.add_argument("--reconstruction", default=None)
    s.add_argument("--view", default=None, help="device id in the reconstruction to render from")
    s.add_argument("--eye", nargs=3, type=float, default=None)
    s.add_argument("--no-shadows", action="store_true")
    s.add_argument("--out", required=True, help="output PFM image")
    s.set_defaults(func=cmd_relight)

    s = sub.add_parser("bandselect", parents=[common], help="exhaustive best band subsets on a chart")
    s.add_argument("capture")
    s.add_argument("reconstruction")
    s.add_argument("--k", default="1-8", help="subset sizes, e.g. 1-8 or 3,6,21")
    s.add_argument("--gamma", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bandselect)

    s = sub.add_parser("eval", parents=[common], help="compare outputs against ground truth")
    s.add_argument("capture")
    s.add_argument("reconstruction")
    s.add_argument("--spectra", default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval)
    return p


_CONFIG_FLAGS = ("seed", "threads", "w_p", "huber_px", "merge_threshold_px", "refine_intrinsics", "gamma", "n_basis")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, {k: getattr(args, k, None) for k in _CONFIG_FLAGS})
        return args.func(args, cfg)
    except (UsageError, ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InitializationError, RegistrationError, OptimizationError, DegenerateGeometryError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
