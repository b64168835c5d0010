"""End-to-end acceptance checks for the full toolkit.

Each test covers one shipping criterion and registers a one-line summary that
the terminal reporter echoes after the run (see conftest). Budgets are
asserted with generous slack relative to interactive runs so the suite stays
meaningful on slower machines.
"""

import sys
import time

import conftest
import numpy as np
import pytest

from bodyfit import metrics, model, priors
from bodyfit import rotations as rot
from bodyfit.assets import load_container, save_container
from bodyfit.camera import Camera, project
from bodyfit.collision import (brute_force_pairs, build_bvh, collision_energy,
                               find_colliding_pairs)
from bodyfit.fitting import FitConfig, StageConfig, default_stages, fit
from bodyfit.keypoints import KeypointSet, parse_openpose, write_openpose
from bodyfit.lbfgs import LbfgsSettings, lbfgs_minimize
from bodyfit.meshio import export_mesh, import_mesh
from bodyfit.objective import FitObjective, TermWeights
from bodyfit.poseprior import train_vposer
from bodyfit.synthetic import build_synthetic_assets, sample_pose_corpus


def report(n: int, label: str, detail: str) -> None:
    line = f"[acceptance {n:2d}] PASS {label}: {detail}"
    conftest.acceptance_log.append(line)
    sys.__stdout__.write(line + "\n")   # live progress under -s runs
    sys.__stdout__.flush()


CAM = Camera((1000.0, 1000.0), (0.0, 0.0), np.eye(3), np.zeros(3))
N_CASES = 20
NOISE_PX = 2.0


# ---------------------------------------------------------------------------
# Shared fixtures (computed once per module)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def assets():
    return build_synthetic_assets(seed=0)


@pytest.fixture(scope="module")
def corpus():
    return sample_pose_corpus(10000, seed=0)


@pytest.fixture(scope="module")
def trained(corpus):
    t0 = time.perf_counter()
    vposer, history = train_vposer(corpus, epochs=50, seed=0)
    return vposer, history, time.perf_counter() - t0


@pytest.fixture(scope="module")
def gmm(corpus):
    return priors.fit_gmm(corpus, n_components=8, seed=0)


@pytest.fixture(scope="module")
def recovery_cases(assets, trained):
    """20 seeded ground-truth frames whose body pose the decoder can express."""
    vposer = trained[0]
    rng = np.random.default_rng(42)
    cases = []
    for _ in range(N_CASES):
        gt = model.ParamVector.rest(assets, latent_dim=vposer.latent_dim)
        gt.latent = rng.normal(size=vposer.latent_dim)
        gt.global_orient = rng.normal(size=3) * 0.3
        gt.shape = rng.normal(size=assets.n_shape) * 0.5
        gt.hand_left = rng.normal(size=assets.n_hand_coeffs) * 0.4
        gt.hand_right = rng.normal(size=assets.n_hand_coeffs) * 0.4
        gt.jaw_pose = rng.normal(size=3) * 0.1
        gt.expression = rng.normal(size=assets.n_expr) * 0.4
        gt.camera_translation = np.array([
            rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1),
            rng.uniform(2.5, 3.3)])
        _, rots = vposer.decode(gt.latent)
        res = model.forward(assets, gt, body_rotmats=rots)
        lm, mask = model.landmark_positions(assets, res.vertices, res.joints)
        pix = project(lm + gt.camera_translation, CAM)
        noise = np.random.default_rng(1042 + len(cases)).normal(size=pix.shape)
        cases.append({
            "gt": gt, "vertices": res.vertices, "pix": pix,
            "conf": np.where(mask, 1.0, 0.0), "noise": noise,
        })
    return cases


def _run_suite(cases, assets, config, vposer=None, gmm=None, noise=0.0):
    t0 = time.perf_counter()
    fits, errors = [], []
    for case in cases:
        pix = case["pix"] + noise * case["noise"]
        out = fit(KeypointSet(pix, case["conf"]), assets, config,
                  vposer=vposer, gmm=gmm)
        fits.append(out)
        errors.append(metrics.v2v_error(out.vertices, case["vertices"]))
    return fits, np.array(errors), time.perf_counter() - t0


@pytest.fixture(scope="module")
def clean_fits(recovery_cases, assets, trained):
    cfg = FitConfig(focal=1000.0, prior_kind="vposer")
    return _run_suite(recovery_cases, assets, cfg, vposer=trained[0])


@pytest.fixture(scope="module")
def noisy_fits(recovery_cases, assets, trained):
    cfg = FitConfig(focal=1000.0, prior_kind="vposer")
    return _run_suite(recovery_cases, assets, cfg, vposer=trained[0],
                      noise=NOISE_PX)


@pytest.fixture(scope="module")
def gmm_noisy_fits(recovery_cases, assets, gmm):
    cfg = FitConfig(focal=1000.0, prior_kind="gmm")
    return _run_suite(recovery_cases, assets, cfg, gmm=gmm, noise=NOISE_PX)


def _contact_schedule():
    # heavier contact weight than the shipping default so the on/off variants
    # separate decisively; 60 iterations keeps 40 extra fits affordable
    coarse, limbs, detail = default_stages()
    return [coarse, limbs,
            StageConfig("contact", 60, detail.weights.scaled(collision=20.0))]


def _final_contact_energy(vertices, assets):
    bvh = build_bvh(vertices, assets.faces)
    pairs = find_colliding_pairs(bvh, vertices, assets.faces,
                                 masked_pairs=assets.contact_mask_pairs)
    return collision_energy(pairs, vertices, assets.faces)[0]


@pytest.fixture(scope="module")
def contact_ablation_fits(recovery_cases, assets, trained):
    out = {}
    for label, flag in (("on", True), ("off", False)):
        cfg = FitConfig(focal=1000.0, prior_kind="vposer", collision=flag,
                        stages=_contact_schedule())
        fits, _, seconds = _run_suite(recovery_cases, assets, cfg,
                                      vposer=trained[0])
        energies = [_final_contact_energy(f.vertices, assets) for f in fits]
        out[label] = (np.array(energies), seconds)
    return out


# ---------------------------------------------------------------------------
# 1. rest pose reproduces the template
# ---------------------------------------------------------------------------

def test_01_rest_pose_identity(assets):
    t0 = time.perf_counter()
    res = model.forward(assets, model.ParamVector.rest(assets))
    dev = np.abs(res.vertices - assets.template).max()
    assert dev < 1e-10
    assert time.perf_counter() - t0 < 1.0
    report(1, "rest-pose identity", f"max deviation {dev:.2e} m")


# ---------------------------------------------------------------------------
# 2. root-only pose moves the mesh rigidly
# ---------------------------------------------------------------------------

def test_02_rigid_motion(assets):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    rest_root = (assets.joint_regressor @ assets.template)[0]
    worst = 0.0
    for _ in range(20):
        omega = rng.normal(size=3)
        params = model.ParamVector.rest(assets)
        params.global_orient = omega
        res = model.forward(assets, params)
        expected = (assets.template - rest_root) @ rot.rodrigues(omega).T + rest_root
        worst = max(worst, np.abs(res.vertices - expected).max())
    assert worst < 1e-8
    assert time.perf_counter() - t0 < 5.0
    report(2, "rigid motion", f"max deviation {worst:.2e} m over 20 rotations")


# ---------------------------------------------------------------------------
# 3. analytic gradients match finite differences
# ---------------------------------------------------------------------------

def test_03_gradient_suite(assets, trained, gmm):
    vposer = trained[0]
    t0 = time.perf_counter()
    rng = np.random.default_rng(33)
    worst = 0.0
    for k in range(50):
        mode = "vposer" if k % 2 == 0 else "axis-angle"
        with_contact = k % 5 == 0     # keep the heavy term to a subset
        pose_scale = 0.45 if with_contact else 0.8
        gt = model.ParamVector.rest(
            assets, latent_dim=vposer.latent_dim if mode == "vposer" else None)
        if mode == "vposer":
            gt.latent = rng.normal(size=vposer.latent_dim) * pose_scale
            rots = vposer.decode(gt.latent)[1]
        else:
            gt.body_pose = rng.normal(size=gt.body_pose.shape) * pose_scale
            rots = None
        gt.camera_translation = np.array([0.0, 0.0, rng.uniform(2.4, 3.2)])
        res = model.forward(assets, gt, body_rotmats=rots)
        lm, mask = model.landmark_positions(assets, res.vertices, res.joints)
        pix = project(lm + gt.camera_translation, CAM)
        pix = pix + rng.normal(size=pix.shape) * 3.0
        kps = KeypointSet(pix, np.where(mask, 1.0, 0.0))
        weights = TermWeights(
            body_pose=rng.uniform(0.1, 2), face_pose=rng.uniform(0.1, 2),
            hands=rng.uniform(0.1, 2), angle=rng.uniform(0.1, 2),
            shape=rng.uniform(0.1, 2), expression=rng.uniform(0.1, 2),
            collision=rng.uniform(0.5, 3) if with_contact else 0.0)
        obj = FitObjective(assets, kps, CAM, weights, sigma=60.0, mode=mode,
                           vposer=vposer if mode == "vposer" else None,
                           gmm=gmm if mode == "axis-angle" else None)
        x = obj.pack(gt) + rng.normal(size=obj.n_params) * 0.05
        obj.refresh_collision(x)        # pairs stay frozen through the probe
        f0, g0 = obj(x)
        h = 1e-6
        fd = np.zeros_like(x)
        for i in range(len(x)):
            xp = x.copy()
            xp[i] += h
            xm = x.copy()
            xm[i] -= h
            fd[i] = (obj(xp)[0] - obj(xm)[0]) / (2 * h)
        rel = np.linalg.norm(fd - g0) / max(np.linalg.norm(g0),
                                            np.linalg.norm(fd), 1e-12)
        worst = max(worst, rel)
    elapsed = time.perf_counter() - t0
    assert worst < 1e-4
    assert elapsed < 120.0
    report(3, "objective gradients", f"worst FD rel err {worst:.2e} "
           f"on 50 configs in {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 4. tree-accelerated pair detection equals brute force
# ---------------------------------------------------------------------------

def _random_soup(rng, n):
    # spread grows with count so the intersection density stays bounded
    spread = 1.2 * n ** (1 / 3)
    base = rng.uniform(-spread, spread, size=(n, 3))
    tris = base[:, None, :] + rng.normal(size=(n, 3, 3)) * 0.25
    verts = tris.reshape(-1, 3)
    faces = np.arange(3 * n).reshape(-1, 3)
    return verts, faces


def _pair_set(pairs):
    return {(int(p.f_s), int(p.f_t)) for p in pairs}


def test_04_collision_oracle(assets):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    for trial in range(100):
        verts, faces = _random_soup(rng, int(rng.integers(10, 501)))
        bvh = build_bvh(verts, faces)
        fast = _pair_set(find_colliding_pairs(bvh, verts, faces))
        slow = _pair_set(brute_force_pairs(verts, faces))
        assert fast == slow, f"soup trial {trial}"
    for trial in range(20):
        params = model.ParamVector.rest(assets)
        params.body_pose = rng.normal(size=params.body_pose.shape) * 0.45
        params.hand_left = rng.normal(size=assets.n_hand_coeffs) * 0.5
        params.hand_right = rng.normal(size=assets.n_hand_coeffs) * 0.5
        verts = model.forward(assets, params).vertices
        bvh = build_bvh(verts, assets.faces)
        fast = _pair_set(find_colliding_pairs(bvh, verts, assets.faces))
        slow = _pair_set(brute_force_pairs(verts, assets.faces))
        assert fast == slow, f"posed body trial {trial}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0
    report(4, "collision oracle", f"100 soups + 20 posed bodies in {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 5. intrusion energy: zero when separated, grows along a push
# ---------------------------------------------------------------------------

def test_05_intrusion_energy_sanity(assets):
    from test_collision import interpenetration_sweep_energies

    from bodyfit.synthetic import _sphere

    t0 = time.perf_counter()
    va, fa = _sphere((0.0, 0.0, 0.0), 0.5, 7, 9)
    vb, fb = _sphere((2.5, 0.0, 0.0), 0.5, 6, 8)
    verts = np.concatenate([va, vb])
    faces = np.concatenate([fa, fb + len(va)])
    bvh = build_bvh(verts, faces)
    pairs = find_colliding_pairs(bvh, verts, faces)
    energy, _ = collision_energy(pairs, verts, faces)
    assert pairs == [] and energy == 0.0

    energies = interpenetration_sweep_energies()
    diffs = np.diff(energies)
    assert np.all(diffs >= -1e-12), energies
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0
    report(5, "intrusion energy", "zero when separated; "
           f"non-decreasing sweep ({energies[0]:.3g} -> {energies[-1]:.3g})")


# ---------------------------------------------------------------------------
# 6. pose-prior training reaches its reconstruction / orthonormality bars
# ---------------------------------------------------------------------------

def test_06_vae_training(corpus, trained):
    vposer, history, seconds = trained
    rec0 = history.initial["rec"]
    best_rec = min(e["rec"] for e in history.epochs)
    assert best_rec < 0.25 * rec0

    # mean per-joint orthonormality residual of decoded validation poses
    rng = np.random.default_rng(0)
    z = rng.normal(size=(256, vposer.latent_dim))
    raw, _ = vposer.decode(z)
    gram = np.einsum("bjxy,bjxz->bjyz", raw, raw)
    resid = np.linalg.norm(gram - np.eye(3), axis=(-2, -1)).mean()
    assert resid < 0.1
    assert seconds < 600.0
    report(6, "prior training", f"val rec {rec0:.1f} -> {best_rec:.2f} "
           f"({100 * best_rec / rec0:.1f}%), orthonormality {resid:.3f}, "
           f"{seconds:.0f}s")


# ---------------------------------------------------------------------------
# 7. synthetic keypoint round trips recover the body
# ---------------------------------------------------------------------------

def test_07_synthetic_recovery(clean_fits, noisy_fits):
    _, clean_err, t_clean = clean_fits
    _, noisy_err, t_noisy = noisy_fits
    assert np.all(clean_err < 5.0), clean_err
    assert np.all(noisy_err < 15.0), noisy_err
    assert t_clean + t_noisy < 1200.0
    report(7, "synthetic recovery",
           f"noise-free mean {clean_err.mean():.2f} / max {clean_err.max():.2f} mm; "
           f"{NOISE_PX:.0f}px-noise mean {noisy_err.mean():.2f} / "
           f"max {noisy_err.max():.2f} mm; {t_clean + t_noisy:.0f}s for 40 fits")


# ---------------------------------------------------------------------------
# 8. component ablations keep their ordering
# ---------------------------------------------------------------------------

def test_08_ablation_orderings(noisy_fits, gmm_noisy_fits, contact_ablation_fits):
    _, latent_err, _ = noisy_fits
    _, mixture_err, _ = gmm_noisy_fits
    assert latent_err.mean() <= mixture_err.mean()

    on_energy, t_on = contact_ablation_fits["on"]
    off_energy, t_off = contact_ablation_fits["off"]
    assert on_energy.sum() < off_energy.sum()
    report(8, "ablation orderings",
           f"mean v2v latent prior {latent_err.mean():.2f} <= mixture "
           f"{mixture_err.mean():.2f} mm; contact energy on {on_energy.sum():.3g}"
           f" < off {off_energy.sum():.3g} ({t_on + t_off:.0f}s)")


# ---------------------------------------------------------------------------
# 9. evaluation metrics behave like metrics
# ---------------------------------------------------------------------------

def test_09_metric_properties():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    pred = rng.normal(size=(500, 3))
    gt = pred + rng.normal(size=(500, 3)) * 0.01
    base = metrics.v2v_error(pred, gt)
    worst = 0.0
    for _ in range(10):
        s = rng.uniform(0.2, 5.0)
        r = rot.rodrigues(rng.normal(size=3))
        t = rng.normal(size=3) * 10
        moved = s * pred @ r.T + t
        worst = max(worst, abs(metrics.v2v_error(moved, gt) - base))
    assert worst < 1e-9

    source = rng.normal(size=(80, 3))
    s_true, r_true, t_true = 1.7, rot.rodrigues(np.array([0.3, -0.2, 0.9])), \
        np.array([0.4, -1.2, 2.0])
    target = s_true * source @ r_true.T + t_true
    tf = metrics.procrustes_align(source, target)
    err = max(abs(tf.scale - s_true), np.abs(tf.rotation - r_true).max(),
              np.abs(tf.translation - t_true).max())
    assert err < 1e-8
    assert time.perf_counter() - t0 < 5.0
    report(9, "metrics", f"similarity invariance {worst:.2e} mm; "
           f"alignment recovery {err:.2e}")


# ---------------------------------------------------------------------------
# 10. optimizer solves the reference problem under its line-search contract
# ---------------------------------------------------------------------------

def test_10_optimizer_reference_problem():
    t0 = time.perf_counter()

    def rosenbrock(x):
        f = 100.0 * (x[1] - x[0] ** 2) ** 2 + (1.0 - x[0]) ** 2
        g = np.array([
            -400.0 * x[0] * (x[1] - x[0] ** 2) - 2.0 * (1.0 - x[0]),
            200.0 * (x[1] - x[0] ** 2),
        ])
        return f, g

    out = lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]),
                         LbfgsSettings(max_iterations=200))
    assert np.abs(out.x - 1.0).max() < 1e-6
    assert out.wolfe_trace, "no accepted steps recorded"
    assert all(s.sufficient_decrease and s.curvature for s in out.wolfe_trace)
    assert time.perf_counter() - t0 < 1.0
    report(10, "optimizer", f"reference problem in {out.iterations} iterations; "
           f"both line-search conditions held on all {len(out.wolfe_trace)} steps")


# ---------------------------------------------------------------------------
# 11. file formats round trip
# ---------------------------------------------------------------------------

def test_11_io_round_trips(tmp_path, assets):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)

    params = model.ParamVector.rest(assets)
    params.body_pose = rng.normal(size=params.body_pose.shape) * 0.4
    verts = model.forward(assets, params).vertices
    p1, p2 = tmp_path / "a.obj", tmp_path / "b.obj"
    export_mesh(verts, assets.faces, p1)
    v2, f2 = import_mesh(p1)
    export_mesh(v2, f2, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert np.array_equal(f2, assets.faces)

    kps = KeypointSet(rng.normal(size=(137, 2)) * 300,
                      rng.uniform(size=137).round(3))
    k1, k2 = tmp_path / "a.json", tmp_path / "b.json"
    write_openpose(k1, kps)
    parsed = parse_openpose(k1)
    write_openpose(k2, parsed)
    assert k1.read_bytes() == k2.read_bytes()
    assert np.array_equal(parsed.points, kps.points)
    assert np.array_equal(parsed.confidence, kps.confidence)

    arrays = {"a": rng.normal(size=(17, 3)), "b": rng.integers(0, 9, (4, 4)),
              "c": rng.normal(size=(5,)).astype(np.float32)}
    save_container(tmp_path / "c1", arrays, {"kind": "test", "n": 3})
    loaded, meta = load_container(tmp_path / "c1")
    save_container(tmp_path / "c2", loaded, meta)
    for name in arrays:
        assert np.array_equal(loaded[name], arrays[name])
        assert loaded[name].dtype == arrays[name].dtype
        assert (tmp_path / "c1" / f"{name}.bin").read_bytes() == \
            (tmp_path / "c2" / f"{name}.bin").read_bytes()
    assert (tmp_path / "c1" / "manifest.json").read_bytes() == \
        (tmp_path / "c2" / "manifest.json").read_bytes()
    assert time.perf_counter() - t0 < 10.0
    report(11, "serialization", "mesh, keypoint, and container round trips exact")
