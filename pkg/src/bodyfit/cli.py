"""Command-line entry points: fit, eval, synth, train-prior.

Exit codes
----------
0  success
2  bad invocation or unreadable/invalid input data
3  initialization failure (camera init, gender/asset resolution, mapping)
4  numeric failure in optimization or training
5  unexpected internal error

All results land under ``--output``; logs go to stderr. Every subcommand is
deterministic for a fixed ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from bodyfit import metrics, model, priors
from bodyfit.assets import AssetError, ModelAssets, load_container, save_container
from bodyfit.camera import Camera, DEFAULT_FOCAL, InitializationError, project
from bodyfit.fitting import FitConfig, fit
from bodyfit.keypoints import KeypointError, KeypointSet, parse_openpose, write_openpose
from bodyfit.meshio import export_mesh, import_mesh
from bodyfit.poseprior import VaeTrainingError, load_vposer, save_vposer, train_vposer
from bodyfit.synthetic import build_synthetic_assets, sample_pose_corpus

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INIT = 3
EXIT_NUMERIC = 4
EXIT_INTERNAL = 5

DEFAULT_SEED = 20140204
GENDER_CONFIDENCE_THRESHOLD = 0.9


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# Gender / asset resolution
# ---------------------------------------------------------------------------

def _load_assets_dir(path: Path) -> ModelAssets:
    try:
        return ModelAssets.from_dir(path)
    except (AssetError, OSError) as exc:
        raise CliError(f"cannot load assets at {path}: {exc}", EXIT_INPUT)


def resolve_gender(frame: str, requested: str, labels: dict | None) -> str:
    """Per-frame gender choice; low-confidence labels fall back to neutral."""
    if requested != "auto":
        return requested
    entry = (labels or {}).get(frame)
    if not entry:
        return "neutral"
    if float(entry.get("confidence", 0.0)) < GENDER_CONFIDENCE_THRESHOLD:
        return "neutral"
    gender = entry.get("gender", "neutral")
    if gender not in ("neutral", "male", "female"):
        raise CliError(f"label for {frame!r} has unknown gender {gender!r}",
                       EXIT_INPUT)
    return gender


def load_gendered_assets(root: Path, gender: str, cache: dict) -> ModelAssets:
    """``root`` is either one container or a directory of per-gender ones."""
    if gender in cache:
        return cache[gender]
    if (root / "manifest.json").is_file():
        assets = _load_assets_dir(root)
        if gender != assets.gender_tag:
            raise CliError(
                f"assets at {root} are {assets.gender_tag!r}; requested "
                f"{gender!r} needs a per-gender directory layout", EXIT_INIT)
    else:
        sub = root / gender
        if not (sub / "manifest.json").is_file():
            raise CliError(f"no {gender!r} asset container under {root}", EXIT_INIT)
        assets = _load_assets_dir(sub)
    cache[gender] = assets
    return assets


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _load_prior(kind: str, path: Path):
    if kind == "vposer":
        try:
            return load_vposer(path), None
        except (AssetError, ValueError, OSError) as exc:
            raise CliError(f"cannot load pose decoder at {path}: {exc}", EXIT_INPUT)
    try:
        return None, priors.GmmPrior.from_dir(path)
    except (AssetError, ValueError, OSError) as exc:
        raise CliError(f"cannot load mixture prior at {path}: {exc}", EXIT_INPUT)


def _keypoint_frames(path: Path) -> list[tuple[str, Path]]:
    if path.is_dir():
        frames = sorted(path.glob("*.json"))
        if not frames:
            raise CliError(f"no keypoint .json files under {path}", EXIT_INPUT)
        return [(f.stem, f) for f in frames]
    if not path.is_file():
        raise CliError(f"keypoint file {path} does not exist", EXIT_INPUT)
    return [(path.stem, path)]


def _params_arrays(params: model.ParamVector) -> dict:
    arrays = {
        "global_orient": params.global_orient,
        "jaw_pose": params.jaw_pose,
        "eye_poses": params.eye_poses,
        "hand_left": params.hand_left,
        "hand_right": params.hand_right,
        "shape": params.shape,
        "expression": params.expression,
        "camera_translation": params.camera_translation,
    }
    if params.latent is not None:
        arrays["latent"] = params.latent
    else:
        arrays["body_pose"] = params.body_pose
    return arrays


def _write_fit_outputs(out_dir: Path, frame: str, result, assets) -> None:
    frame_dir = out_dir / frame
    frame_dir.mkdir(parents=True, exist_ok=True)
    export_mesh(result.vertices, assets.faces, frame_dir / "mesh.obj")
    meta = {
        "kind": "fit-params",
        "status": result.status,
        "camera": {
            "focal": list(result.camera.focal),
            "principal_point": list(result.camera.principal_point),
        },
    }
    save_container(frame_dir / "params", _params_arrays(result.params), meta)
    with open(frame_dir / "energy_trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "iteration", "total", "data", "body_pose",
                         "face_pose", "hands", "angle", "shape", "expression",
                         "collision"])
        for trace in result.stage_traces:
            rows = trace.term_history
            for i, bd in enumerate(rows):
                writer.writerow([trace.name, i, repr(bd["total"]),
                                 *(repr(bd[k]) for k in ("data", "body_pose",
                                   "face_pose", "hands", "angle", "shape",
                                   "expression", "collision"))])


def cmd_fit(args) -> int:
    out_dir = Path(args.output)
    frames = _keypoint_frames(Path(args.keypoints))
    vposer, gmm = _load_prior(args.prior, Path(args.prior_model))
    labels = None
    if args.gender == "auto":
        if not args.gender_labels:
            raise CliError("--gender auto needs --gender-labels", EXIT_INPUT)
        try:
            labels = json.loads(Path(args.gender_labels).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read gender labels: {exc}", EXIT_INPUT)

    config = FitConfig(focal=args.focal, sigma=args.sigma,
                       prior_kind=args.prior,
                       collision=args.collision == "on", trace_terms=True)
    assets_root = Path(args.assets)
    cache: dict = {}

    def run_frame(item):
        frame, path = item
        try:
            kps = parse_openpose(path)
        except (KeypointError, OSError) as exc:
            raise CliError(f"{frame}: cannot parse keypoints: {exc}", EXIT_INPUT)
        gender = resolve_gender(frame, args.gender, labels)
        assets = load_gendered_assets(assets_root, gender, cache)
        try:
            result = fit(kps, assets, config, vposer=vposer, gmm=gmm)
        except InitializationError as exc:
            raise CliError(f"{frame}: camera init failed: {exc}", EXIT_INIT)
        except ValueError as exc:
            raise CliError(f"{frame}: {exc}", EXIT_INIT)
        except FloatingPointError as exc:
            raise CliError(f"{frame}: numeric failure: {exc}", EXIT_NUMERIC)
        if result.status == "non-finite":
            raise CliError(f"{frame}: optimizer hit non-finite values",
                           EXIT_NUMERIC)
        _write_fit_outputs(out_dir, frame, result, assets)
        _log(f"{frame}: {result.status}, final energy "
             f"{result.final_energy:.6g}")

    # resolve every frame's assets up-front so gender errors surface before
    # any worker starts writing outputs
    for frame, _ in frames:
        load_gendered_assets(assets_root, resolve_gender(frame, args.gender,
                                                         labels), cache)
    if args.threads > 1 and len(frames) > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            list(pool.map(run_frame, frames))
    else:
        for item in frames:
            run_frame(item)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    pred_dir, ref_dir = Path(args.predicted), Path(args.reference)
    preds = sorted(pred_dir.glob("*.obj"))
    if not preds:
        raise CliError(f"no .obj meshes under {pred_dir}", EXIT_INPUT)
    assets = _load_assets_dir(Path(args.assets))
    hand_joints = np.concatenate([assets.hand_joint_ids_left,
                                  assets.hand_joint_ids_right])
    report = metrics.EvalReport()
    for pred_path in preds:
        ref_path = ref_dir / pred_path.name
        if not ref_path.is_file():
            raise CliError(f"no reference mesh for {pred_path.name}", EXIT_INPUT)
        try:
            pv, pf = import_mesh(pred_path)
            rv, rf = import_mesh(ref_path)
        except (ValueError, OSError) as exc:
            raise CliError(f"{pred_path.name}: {exc}", EXIT_INPUT)
        if pv.shape != rv.shape or not np.array_equal(pf, rf):
            raise CliError(f"{pred_path.name}: mesh topology mismatch",
                           EXIT_INPUT)
        transform = metrics.procrustes_align(pv, rv)
        v2v = metrics.v2v_error(pv, rv)
        pj = assets.joint_regressor @ pv
        rj = assets.joint_regressor @ rv
        mpjpe = metrics.joint_error(pj, rj)
        hand = metrics.joint_error(pj, rj, subset=hand_joints)
        report.add(metrics.FrameEval(pred_path.stem, v2v, mpjpe, hand,
                                     transform.scale))
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.to_csv(out_dir / "report.csv")
    _log(f"{len(preds)} frames: mean v2v {report.mean_v2v():.3f} mm, "
         f"mean mpjpe {report.mean_mpjpe():.3f} mm")
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)

    assets_by_gender = {}
    for gender in ("neutral", "male", "female"):
        assets = build_synthetic_assets(seed=args.seed, gender=gender)
        # float64 so round-tripped assets reproduce the GT meshes/keypoints
        # written below bit-for-bit
        assets.to_dir(out_dir / "assets" / gender, dtype="float64")
        assets_by_gender[gender] = assets
    assets = assets_by_gender["neutral"]

    corpus = sample_pose_corpus(args.corpus_size, seed=args.seed)
    np.save(out_dir / "pose_corpus.npy", corpus)

    camera = Camera((args.focal, args.focal), (0.0, 0.0), np.eye(3), np.zeros(3))
    (out_dir / "camera.json").write_text(json.dumps({
        "focal": [args.focal, args.focal],
        "principal_point": [0.0, 0.0],
        "rotation": np.eye(3).tolist(),
    }, indent=2) + "\n")

    kp_dir = out_dir / "keypoints"
    mesh_dir = out_dir / "meshes"
    kp_dir.mkdir(exist_ok=True)
    mesh_dir.mkdir(exist_ok=True)
    manifest = []
    for i in range(args.cases):
        frame = f"case{i:03d}"
        params = model.ParamVector.rest(assets)
        params.body_pose = corpus[rng.integers(len(corpus))].reshape(-1, 3)
        params.global_orient = rng.normal(size=3) * 0.3
        params.shape = rng.normal(size=assets.n_shape) * 0.5
        params.hand_left = rng.normal(size=assets.n_hand_coeffs) * 0.4
        params.hand_right = rng.normal(size=assets.n_hand_coeffs) * 0.4
        params.jaw_pose = rng.normal(size=3) * 0.1
        params.expression = rng.normal(size=assets.n_expr) * 0.4
        params.camera_translation = np.array([
            rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(2.5, 3.3)])

        res = model.forward(assets, params)
        lm, mask = model.landmark_positions(assets, res.vertices, res.joints)
        pix = project(lm, camera.with_translation(params.camera_translation))
        if args.noise > 0:
            pix = pix + rng.normal(size=pix.shape) * args.noise
        conf = np.where(mask, 1.0, 0.0)

        export_mesh(res.vertices, assets.faces, mesh_dir / f"{frame}.obj")
        write_openpose(kp_dir / f"{frame}.json", KeypointSet(pix, conf))
        save_container(out_dir / "params" / frame, _params_arrays(params),
                       {"kind": "fit-params", "frame": frame})
        manifest.append(frame)

    (out_dir / "frames.json").write_text(json.dumps(manifest, indent=2) + "\n")
    _log(f"wrote {args.cases} cases under {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-prior
# ---------------------------------------------------------------------------

def _load_corpus(path: Path) -> np.ndarray:
    if not path.is_file():
        raise CliError(f"corpus file {path} does not exist", EXIT_INPUT)
    try:
        corpus = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read corpus: {exc}", EXIT_INPUT)
    if corpus.ndim != 2:
        raise CliError(f"corpus must be 2-D, got shape {corpus.shape}", EXIT_INPUT)
    bad = np.flatnonzero(~np.isfinite(corpus).all(axis=1))
    if bad.size:
        raise CliError(f"corpus row {bad[0]} contains non-finite values",
                       EXIT_INPUT)
    return corpus


def cmd_train_prior(args) -> int:
    corpus = _load_corpus(Path(args.corpus))
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.prior == "vposer":
        try:
            vposer, history = train_vposer(
                corpus, epochs=args.epochs, seed=args.seed,
                latent_dim=args.latent_dim, hidden=args.hidden)
        except VaeTrainingError as exc:
            raise CliError(f"training diverged: {exc}", EXIT_NUMERIC)
        save_vposer(vposer, out_dir / "prior")
        keys = sorted(history.initial)
        with open(out_dir / "training_curve.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch"] + keys)
            writer.writerow([0] + [repr(history.initial[k]) for k in keys])
            for e, entry in enumerate(history.epochs, start=1):
                writer.writerow([e] + [repr(entry[k]) for k in keys])
        _log(f"decoder saved; best epoch {history.best_epoch}")
    else:
        try:
            gmm = priors.fit_gmm(corpus, n_components=args.components,
                                 seed=args.seed)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise CliError(f"mixture fit failed: {exc}", EXIT_NUMERIC)
        gmm.to_dir(out_dir / "prior")
        energies = [gmm.energy(row)[0] for row in corpus]
        with open(out_dir / "training_curve.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_energy"])
            writer.writerow(["final", repr(float(np.mean(energies)))])
        _log(f"mixture saved; mean corpus energy {np.mean(energies):.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bodyfit",
        description="Fit an expressive body model to 2D keypoints.",
        epilog="Exit codes: 0 ok, 2 bad input, 3 init failure, "
               "4 numeric failure, 5 internal error.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--output", required=True, help="directory for all outputs")
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
        p.add_argument("--threads", type=int, default=1)

    p_fit = sub.add_parser("fit", help="fit frames of keypoints")
    common(p_fit)
    p_fit.add_argument("--assets", required=True,
                       help="asset container, or directory of per-gender containers")
    p_fit.add_argument("--keypoints", required=True,
                       help="OpenPose .json file or directory of them")
    p_fit.add_argument("--prior", choices=("vposer", "gmm"), default="vposer")
    p_fit.add_argument("--prior-model", required=True,
                       help="container written by train-prior")
    p_fit.add_argument("--collision", choices=("on", "off"), default="off")
    p_fit.add_argument("--focal", type=float, default=DEFAULT_FOCAL)
    p_fit.add_argument("--sigma", type=float, default=None,
                       help="robustifier scale in px (default: focal/10)")
    p_fit.add_argument("--gender",
                       choices=("neutral", "male", "female", "auto"),
                       default="neutral")
    p_fit.add_argument("--gender-labels",
                       help="JSON {frame: {gender, confidence}} for --gender auto")
    p_fit.set_defaults(func=cmd_fit)

    p_eval = sub.add_parser("eval", help="score predicted meshes against GT")
    common(p_eval)
    p_eval.add_argument("--predicted", required=True)
    p_eval.add_argument("--reference", required=True)
    p_eval.add_argument("--assets", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_synth = sub.add_parser("synth", help="generate the synthetic fixture set")
    common(p_synth)
    p_synth.add_argument("--cases", type=int, default=8, metavar="N")
    p_synth.add_argument("--corpus-size", type=int, default=2000, metavar="K")
    p_synth.add_argument("--noise", type=float, default=0.0,
                         help="keypoint pixel noise sigma")
    p_synth.add_argument("--focal", type=float, default=1000.0)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train-prior", help="train the pose prior")
    common(p_train)
    p_train.add_argument("--corpus", required=True, help=".npy of (M, 3J) poses")
    p_train.add_argument("--prior", choices=("vposer", "gmm"), default="vposer")
    p_train.add_argument("--epochs", type=int, default=50)
    p_train.add_argument("--latent-dim", type=int, default=32)
    p_train.add_argument("--hidden", type=int, default=512)
    p_train.add_argument("--components", type=int, default=8)
    p_train.set_defaults(func=cmd_train_prior)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        _log(f"error: {exc}")
        return exc.code
    except Exception as exc:           # noqa: BLE001 - last-resort boundary
        _log(f"internal error: {exc!r}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
