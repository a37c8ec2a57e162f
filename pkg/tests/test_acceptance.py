"""Acceptance gate: one test per shipped guarantee, so `pytest -v` prints one
pass/fail line per guarantee.

Most checks are oracle comparisons that run in seconds. The drag-fidelity and
ablation measurements share one module-scoped batch of pipeline runs on the
trained checkpoint (20 scenes x 3 variants, several minutes); the API check
boots the real HTTP service in a subprocess and drives it over localhost.
"""
import json
import os
import socket
import statistics
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from dragedit.backbone import LatentState
from dragedit.evalsuite import kid, tight_crop
from dragedit.guidance import (build_inpaint_reference,
                               compose_regional_gradient, energy_content,
                               energy_edit, energy_inpaint)
from dragedit.inversion import (NoiseTrajectory, ShiftSpec, ddpm_invert,
                                inject_noise_prior, replay)
from dragedit.masks import RegionMasks, bounding_box, downsample_mask
from dragedit.npml import (NpmlConfig, aggregate_object_attention, npml_loss,
                           object_slot)
from dragedit.pipeline import EditSpec, _object_slot_for, run_edit
from dragedit.toydata import COLORS, centroid_of_mask, render_scene, sample_scene, shape_mask

from oracles import (central_difference, compose_by_hand, mmd2_double_sum,
                     npml_by_formula, poly3_kernel, remap_by_loops)

CHECKPOINT = os.path.join(os.path.dirname(__file__), "..", "checkpoints", "toy.pt")


# ------------------------------------------------------------ shared fixture

def fixture_cases(seed=2026, n=20, resolution=32):
    """20 deterministic scenes with drags of 4-8 px that stay on canvas."""
    rng = np.random.default_rng(seed)
    cases = []
    while len(cases) < n:
        scene = sample_scene(rng, resolution)
        m = shape_mask(scene, resolution)
        y0, y1, x0, x1 = bounding_box(torch.from_numpy(m))
        dx = int(rng.integers(-8, 9))
        dy = int(rng.integers(-8, 9))
        if not 16 <= dx * dx + dy * dy <= 64:
            continue
        if not (0 <= y0 + dy and y1 + dy <= resolution
                and 0 <= x0 + dx and x1 + dx <= resolution):
            continue
        cases.append((scene, dx, dy))
    return cases


def case_doc(scene, dx, dy, **overrides):
    """The fixture editing configuration: guidance weights scaled for the toy
    model's noise magnitudes, reconstruction branch at plain conditioning."""
    doc = {"prompt_source": scene.caption, "prompt_target": scene.caption,
           "drag": {"dx": dx, "dy": dy}, "cfg_scale_1": 1.0,
           "energy": {"m_edit": 30.0, "m_content": 30.0, "m_inpaint": 60.0,
                      "clip_norm": 10.0}}
    doc.update(overrides)
    return doc


def outside_attention_mass(result, spec, backbone):
    """Mean fraction of the object word's attention outside M_c over the
    optimization window."""
    cond = backbone.encode_prompt(spec.prompt_source)
    slot = _object_slot_for(cond, spec.object_word)
    m_c16 = result.masks.at(16)["m_c"]
    vals = []
    for t in result.attention_store.captures:
        if not spec.npml.t_lo <= t <= spec.npml.t_hi:
            continue
        att = aggregate_object_attention(result.attention_store.get(t), slot, 16)
        vals.append(float((att * (1 - m_c16)).sum() / att.sum()))
    return sum(vals) / len(vals)


@pytest.fixture(scope="module")
def fixture_runs(trained_backbone):
    """Per scene: the tuned run, a no-attention-optimization run, and a
    no-noise-prior run, reduced to the numbers the criteria compare."""
    records = []
    for i, (scene, dx, dy) in enumerate(fixture_cases()):
        img = render_scene(scene)
        m_v = torch.from_numpy(shape_mask(scene)).float()
        spec_on = EditSpec.from_json(case_doc(scene, dx, dy))
        r_on = run_edit(trained_backbone, spec_on, image=img, m_v=m_v)
        r_npml_off = run_edit(
            trained_backbone,
            EditSpec.from_json(case_doc(scene, dx, dy, ablations={"npml": False})),
            image=img, m_v=m_v)
        r_dnp_off = run_edit(
            trained_backbone,
            EditSpec.from_json(case_doc(scene, dx, dy, ablations={"dnp": False})),
            image=img, m_v=m_v)

        # commanded-offset error of the recolored object's center of mass
        c0 = centroid_of_mask(shape_mask(scene))
        target = 2 * np.array(COLORS[scene.color]).reshape(3, 1, 1) - 1
        dist = np.linalg.norm(r_on.branch1.numpy() - target, axis=0)
        found = (dist < 0.6).astype(np.float64)
        if found.sum() == 0:
            drag_err = float("inf")
        else:
            c = centroid_of_mask(found)
            drag_err = ((c[0] - c0[0] - dx) ** 2 + (c[1] - c0[1] - dy) ** 2) ** 0.5

        # object-word attention concentration with/without the optimizer
        mass_on = outside_attention_mass(r_on, spec_on, trained_backbone)
        mass_off = outside_attention_mass(r_npml_off, spec_on, trained_backbone)

        # foreground reconstruction error with/without the noise prior
        crop_src = tight_crop(img, m_v)
        fg_on = float(((tight_crop(r_on.branch1, r_on.masks.m_c) - crop_src) ** 2).mean())
        fg_off = float(((tight_crop(r_dnp_off.branch1, r_dnp_off.masks.m_c)
                         - crop_src) ** 2).mean())

        rec = {"caption": scene.caption, "dx": dx, "dy": dy,
               "drag_err": drag_err, "mass_on": mass_on, "mass_off": mass_off,
               "fg_on": fg_on, "fg_off": fg_off}
        if i == 0:
            rec["doc"] = case_doc(scene, dx, dy)
            rec["image"] = img
            rec["m_v"] = m_v
            rec["branch1"] = r_on.branch1
            rec["branch2"] = r_on.branch2
        records.append(rec)
    return records


# ----------------------------------------------------------------- criteria

def test_inversion_reconstructs_20_toy_images_exactly(trained_backbone):
    worst_err, slowest = 0.0, 0.0
    for scene, _, _ in fixture_cases():
        img = render_scene(scene)
        cond = trained_backbone.encode_prompt(scene.caption)
        t0 = time.monotonic()
        traj = ddpm_invert(trained_backbone, img, cond, seed=0, cfg_scale=3.5)
        recon = replay(trained_backbone, traj)
        elapsed = time.monotonic() - t0
        err = float((recon - img).abs().max())
        worst_err = max(worst_err, err)
        slowest = max(slowest, elapsed)
        assert err <= 1e-4, f"{scene.caption}: reconstruction err {err}"
        assert elapsed < 10.0, f"{scene.caption}: {elapsed:.1f}s per case"
    print(f"\ninversion: worst abs err {worst_err:.2e}, "
          f"slowest case {slowest:.2f}s over 20 images")


def test_noise_prior_injection_matches_remap_oracle():
    g = torch.Generator().manual_seed(4)
    checked = 0
    while checked < 100:
        T = int(torch.randint(2, 5, (1,), generator=g))
        h = int(torch.randint(5, 10, (1,), generator=g))
        w = int(torch.randint(5, 10, (1,), generator=g))
        noise = torch.randn(T, 2, h, w, generator=g)
        states = torch.randn(T + 1, 2, h, w, generator=g)
        traj = NoiseTrajectory(states, noise, "p", 1.0, 0, {"T": T})
        m_c = (torch.rand(h, w, generator=g) < 0.4).float()
        dx = int(torch.randint(-(w - 1), w, (1,), generator=g))
        dy = int(torch.randint(-(h - 1), h, (1,), generator=g))
        if m_c.sum() == 0:
            continue
        ys, xs = torch.nonzero(m_c, as_tuple=True)
        in_bounds = ((ys - dy >= 0) & (ys - dy < h)
                     & (xs - dx >= 0) & (xs - dx < w))
        if not bool(in_bounds.any()):
            continue  # rejected by the library as an over-long drag
        out = inject_noise_prior(traj, m_c, ShiftSpec(dx, dy))
        assert torch.equal(out.noise_maps, remap_by_loops(noise, m_c, dx, dy))
        assert torch.equal(out.states, states)  # states are never touched
        checked += 1
    # identity cases are bitwise no-ops
    traj = NoiseTrajectory(torch.randn(4, 2, 8, 8, generator=g),
                           torch.randn(3, 2, 8, 8, generator=g),
                           "p", 1.0, 0, {"T": 3})
    m = torch.zeros(8, 8)
    m[2:5, 2:5] = 1.0
    assert torch.equal(inject_noise_prior(traj, m, ShiftSpec(0, 0)).noise_maps,
                       traj.noise_maps)
    assert torch.equal(
        inject_noise_prior(traj, torch.zeros(8, 8), ShiftSpec(3, 1)).noise_maps,
        traj.noise_maps)
    print("\nnoise-prior injection: 100 randomized cases bitwise, identities bitwise")


def test_attention_loss_matches_formula_oracle():
    g = torch.Generator().manual_seed(31)
    checked, worst = 0, 0.0
    while checked < 100:
        size = int(torch.randint(2, 24, (1,), generator=g))
        a = torch.rand(size, size, generator=g)
        m = (torch.rand(size, size, generator=g) < 0.4).float()
        lam_c = float(torch.rand(1, generator=g))
        lam_i = float(torch.rand(1, generator=g))
        if a.sum() == 0:
            continue
        want = npml_by_formula(a, m, lam_c, lam_i)
        got = float(npml_loss(a, m, lam_c, lam_i))
        rel = abs(got - want) / max(abs(want), 1e-30)
        worst = max(worst, rel)
        assert rel <= 1e-6, f"case {checked}: got {got}, want {want}"
        checked += 1
    # fully concentrated attention: exactly zero loss
    m = torch.zeros(10, 10, dtype=torch.float64)
    m[2:8, 2:8] = 1.0
    assert float(npml_loss(m.clone(), m, 0.5, 0.5)) == 0.0
    # uniform attention entirely outside the mask: exactly lam_c + lam_i
    # (64 outside positions, so every norm in the cosine is exact)
    assert float(npml_loss(1.0 - m, m, 0.5, 0.5)) == 1.0
    print(f"\nattention loss: 100 randomized cases, worst rel err {worst:.2e}; "
          f"exact cases exact")


def test_regional_composition_matches_arithmetic_oracle():
    g = torch.Generator().manual_seed(61)
    for _ in range(20):
        dx = int(torch.randint(-6, 7, (1,), generator=g))
        dy = int(torch.randint(-6, 7, (1,), generator=g))
        m_v = torch.zeros(32, 32)
        m_v[10:18, 6:14] = 1.0
        masks = RegionMasks.build(m_v, dx, dy)
        g_e = torch.randn(3, 32, 32, generator=g)
        g_i = torch.randn(3, 32, 32, generator=g)
        g_c = torch.randn(3, 32, 32, generator=g)
        want = compose_by_hand(g_e, g_i, g_c, masks.m_c, masks.m_v)
        got = compose_regional_gradient(g_e, g_i, g_c, masks)
        assert torch.allclose(got, want, atol=1e-6)
    # empty-region limit: the content gradient passes through untouched
    zeroed = replace(masks, m_c=torch.zeros(32, 32), m_v=torch.zeros(32, 32))
    assert torch.equal(compose_regional_gradient(g_e, g_i, g_c, zeroed), g_c)
    print("\nregional composition: 20 randomized fields match; "
          "empty-mask limit is pure content")


def test_every_energy_and_attention_gradient_matches_finite_differences(backbone):
    g = torch.Generator().manual_seed(60)
    m_v = torch.zeros(32, 32)
    m_v[10:18, 6:14] = 1.0
    masks = RegionMasks.build(m_v, 8, 0)
    shift = ShiftSpec(8, 0)
    ref = torch.randn(4, 16, 16, generator=g).double()
    prior = build_inpaint_reference(ref, masks)
    region16 = masks.at(16)["m_v"]
    terms = {
        "edit": lambda x: energy_edit(x, ref, masks, shift),
        "content": lambda x: energy_content(x, ref, region16),
        "inpaint": lambda x: energy_inpaint(x, ref, prior, masks),
    }
    for name, f in terms.items():
        for probe in range(20):
            x0 = torch.randn(4, 16, 16, generator=g).double()
            x = x0.clone().requires_grad_(True)
            (grad,) = torch.autograd.grad(f(x), x)
            fd = central_difference(f, x0.clone(), h=1e-5)
            rel = float((grad - fd).norm()) / max(float(grad.norm()), 1e-12)
            assert rel < 1e-2, f"{name} probe {probe}: rel {rel}"

    # the attention-concentration loss, w.r.t. the map itself
    for probe in range(20):
        a0 = (torch.rand(6, 6, generator=g).double() + 0.05)
        m = (torch.rand(6, 6, generator=g) < 0.4).float()
        a = a0.clone().requires_grad_(True)
        (grad,) = torch.autograd.grad(npml_loss(a, m, 0.5, 0.5), a)
        fd = central_difference(lambda x: npml_loss(x, m, 0.5, 0.5),
                                a0.clone(), h=1e-5)
        rel = float((grad - fd).norm()) / max(float(grad.norm()), 1e-12)
        assert rel < 1e-2, f"attention-map probe {probe}: rel {rel}"

    # ... and through the model, w.r.t. the object word's embedding
    cond = backbone.encode_prompt("a big red circle")
    slot = object_slot(cond)
    m_c = torch.zeros(32, 32)
    m_c[8:20, 8:20] = 1.0
    cfg = NpmlConfig()
    layers = [l for l in cfg.layers
              if backbone.config.layer_resolution(l) == cfg.resolution]
    m16 = downsample_mask(m_c, cfg.resolution)
    emb = cond.token_embeddings.detach().clone()

    def loss_for(vec, state, t):
        probe_cond = cond.with_slot(slot, vec)
        _, capture = backbone.predict_noise(state, t, probe_cond, capture=layers)
        att = aggregate_object_attention(capture, slot, cfg.resolution, layers)
        return npml_loss(att, m16, cfg.lambda_c, cfg.lambda_i)

    h = 3e-2
    for probe in range(20):
        t = int(torch.randint(cfg.t_lo, cfg.t_hi + 1, (1,), generator=g))
        state = LatentState(torch.randn(3, 32, 32, generator=g), t)
        vec = emb[slot].clone().requires_grad_(True)
        (grad,) = torch.autograd.grad(loss_for(vec, state, t), vec)
        fd = torch.zeros_like(grad)
        for d in range(vec.numel()):
            plus, minus = emb[slot].clone(), emb[slot].clone()
            plus[d] += h
            minus[d] -= h
            fd[d] = (float(loss_for(plus, state, t).detach())
                     - float(loss_for(minus, state, t).detach())) / (2 * h)
        rel = float((grad - fd).norm() / grad.norm())
        assert rel < 1e-2, f"embedding probe {probe}: rel {rel}"
    print("\ngradients: edit/content/inpaint, attention loss, and embedding "
          "path each match finite differences on 20 probes")


def test_zero_drag_branches_agree(trained_backbone):
    worst = 0.0
    for scene, _, _ in fixture_cases()[:3]:
        img = render_scene(scene)
        m_v = torch.from_numpy(shape_mask(scene)).float()
        spec = EditSpec.from_json({
            "prompt_source": scene.caption, "prompt_target": scene.caption,
            "drag": {"dx": 0, "dy": 0}, "cfg_scale_2": 3.5,
            "control": {"mode": "none"}})
        res = run_edit(trained_backbone, spec, image=img, m_v=m_v)
        diff = float((res.branch1 - res.branch2).abs().max())
        worst = max(worst, diff)
        assert diff <= 1e-4, f"{scene.caption}: branch divergence {diff}"
    print(f"\nzero-drag equivalence: worst branch divergence {worst:.2e} "
          f"over 3 scenes")


def test_drag_lands_within_2px_on_18_of_20_scenes(fixture_runs):
    errors = [r["drag_err"] for r in fixture_runs]
    n_ok = sum(e <= 2.0 for e in errors)
    lines = [f"  ({r['dx']:+d},{r['dy']:+d}) {r['caption']}: err {r['drag_err']:.2f}px"
             for r in fixture_runs]
    print("\n" + "\n".join(lines))
    print(f"drag fidelity: {n_ok}/20 within 2px (need >= 18)")
    assert n_ok >= 18


def test_attention_optimizer_concentrates_mass_on_16_of_20_scenes(fixture_runs):
    n_dec = sum(r["mass_on"] < r["mass_off"] for r in fixture_runs)
    print(f"\nattention optimizer: outside-mask mass strictly drops on "
          f"{n_dec}/20 scenes (need >= 16)")
    assert n_dec >= 16


def test_disabling_noise_prior_worsens_foreground_error(fixture_runs):
    mean_on = statistics.fmean(r["fg_on"] for r in fixture_runs)
    mean_off = statistics.fmean(r["fg_off"] for r in fixture_runs)
    n_worse = sum(r["fg_off"] > r["fg_on"] for r in fixture_runs)
    print(f"\nnoise prior ablation: mean foreground error "
          f"{mean_on:.4f} (on) vs {mean_off:.4f} (off); worse on "
          f"{n_worse}/20 scenes")
    assert mean_off > mean_on


def test_kid_matches_double_sum_oracle_and_is_centred():
    g = torch.Generator().manual_seed(9)
    worst = 0.0
    for _ in range(10):
        a = [torch.randn(5, generator=g, dtype=torch.float64) for _ in range(6)]
        b = [torch.randn(5, generator=g, dtype=torch.float64) + 0.5
             for _ in range(7)]
        want = mmd2_double_sum(a, b, poly3_kernel)
        got = kid(a, b)
        rel = abs(got - want) / max(abs(want), 1e-30)
        worst = max(worst, rel)
        assert rel <= 1e-10, f"got {got}, want {want}"
    # Monte-Carlo: same-distribution estimate is within 3 standard errors of 0
    g = torch.Generator().manual_seed(7)
    vals = [kid(list(torch.randn(40, 8, generator=g, dtype=torch.float64)),
                list(torch.randn(40, 8, generator=g, dtype=torch.float64)))
            for _ in range(50)]
    mean = statistics.fmean(vals)
    se = statistics.stdev(vals) / len(vals) ** 0.5
    print(f"\nkid: worst oracle rel err {worst:.2e}; same-distribution mean "
          f"{mean:+.5f} (se {se:.5f}, |z| {abs(mean) / se:.2f})")
    assert abs(mean) <= 3 * se


def test_editing_is_bitwise_deterministic(trained_backbone, fixture_runs):
    first = fixture_runs[0]
    res = run_edit(trained_backbone, EditSpec.from_json(first["doc"]),
                   image=first["image"], m_v=first["m_v"])
    assert torch.equal(res.branch1, first["branch1"])
    assert torch.equal(res.branch2, first["branch2"])
    print("\ndeterminism: repeated run is bitwise identical on both branches")


# ----------------------------------------------------------- live HTTP sweep

@pytest.fixture(scope="module")
def live_service(tmp_path_factory):
    import httpx
    sessions = tmp_path_factory.mktemp("live-sessions")
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    proc = subprocess.Popen(
        [sys.executable, "-m", "dragedit.cli", "serve",
         "--checkpoint", CHECKPOINT, "--port", str(port),
         "--sessions-dir", str(sessions), "--max-jobs", "2"],
        stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    base = f"http://127.0.0.1:{port}"
    try:
        deadline = time.monotonic() + 30
        while True:
            try:
                if httpx.get(base + "/healthz", timeout=1).status_code == 200:
                    break
            except httpx.HTTPError:
                pass
            if time.monotonic() > deadline:
                proc.terminate()
                pytest.fail("service did not come up within 30s")
            time.sleep(0.2)
        yield base, sessions
    finally:
        proc.terminate()
        proc.wait(timeout=10)


def test_http_service_contract(live_service, tmp_path):
    import httpx
    base, sessions_root = live_service
    from dragedit.images import save_image, save_mask
    from dragedit.pipeline import EDIT_SPEC_SCHEMA
    from dragedit.toydata import Scene

    scene = Scene(shape="circle", color="red", size="small", cx=12.0, cy=16.0,
                  radius=4.0)
    save_image(render_scene(scene), tmp_path / "scene.png")
    save_mask(torch.from_numpy(shape_mask(scene)).float(), tmp_path / "mask.png")
    image_png = (tmp_path / "scene.png").read_bytes()
    mask_png = (tmp_path / "mask.png").read_bytes()
    spec = {"prompt_source": scene.caption, "prompt_target": scene.caption,
            "drag": {"dx": 3, "dy": 0}, "T_skip": 90,
            "energy": {"t_lo": 4, "t_hi": 9},
            "npml": {"t_lo": 4, "t_hi": 9, "inner_steps": 1}}

    c = httpx.Client(base_url=base, timeout=30)

    # happy path: schema, session, uploads, inversion, job, results
    assert c.get("/healthz").json()["status"] == "ok"
    assert c.get("/schema/edit-spec").json() == EDIT_SPEC_SCHEMA
    r = c.post("/sessions", content=image_png)
    assert r.status_code == 201 and r.json()["has_image"]
    sid = r.json()["session_id"]
    assert c.post(f"/sessions/{sid}/mask", content=mask_png).status_code == 200
    assert c.post(f"/sessions/{sid}/assets/extra.png",
                  content=image_png).status_code == 200
    inv = c.post(f"/sessions/{sid}/invert", json={"prompt": scene.caption})
    assert inv.status_code == 200 and inv.json()["cached"] is False
    assert c.post(f"/sessions/{sid}/invert",
                  json={"prompt": scene.caption}).json()["cached"] is True

    r = c.post(f"/sessions/{sid}/jobs", json=spec)
    assert r.status_code == 202
    jid = r.json()["job_id"]
    deadline = time.monotonic() + 120
    while True:
        status = c.get(f"/jobs/{jid}").json()["status"]
        if status in ("done", "failed"):
            break
        assert time.monotonic() < deadline, "job did not finish in 120s"
        time.sleep(0.2)
    assert status == "done"

    events = c.get(f"/jobs/{jid}/events").json()
    assert events["events"][0]["stage"] == "invert"
    assert events["events"][-1]["stage"] == "done"
    tail = c.get(f"/jobs/{jid}/events", params={"cursor": events["cursor"]}).json()
    assert tail["events"] == []

    res = c.get(f"/jobs/{jid}/result/branch1")
    assert res.status_code == 200
    assert res.headers["content-type"] == "image/png"
    etag = res.headers["etag"]
    assert c.get(f"/jobs/{jid}/result/branch1",
                 headers={"If-None-Match": etag}).status_code == 304
    assert c.get(f"/jobs/{jid}/result/branch2").status_code == 200

    with np.load(sessions_root / sid / "jobs" / jid / "attention.npz") as blob:
        key = [k for k in blob.files if k != "meta"][0]
    t, token = int(key[1:4]), int(key.split("_w")[1])
    att = c.get(f"/sessions/{sid}/attention",
                params={"token": token, "t": t, "job": jid})
    assert att.status_code == 200
    assert att.headers["content-type"] == "image/png"

    # documented error codes: 404 unknown ids, 409 missing uploads, 422 specs
    assert c.get("/jobs/ffffffffffff").status_code == 404
    assert c.get("/jobs/ffffffffffff/result/branch1").status_code == 404
    assert c.post("/sessions/ffffffffffff/jobs", json=spec).status_code == 404
    assert c.get(f"/sessions/{sid}/attention",
                 params={"token": 99, "t": 1}).status_code == 404

    bare = c.post("/sessions").json()["session_id"]
    assert c.post(f"/sessions/{bare}/invert",
                  json={"prompt": scene.caption}).status_code == 409
    assert c.post(f"/sessions/{bare}/jobs", json=spec).status_code == 409

    bad = c.post(f"/sessions/{sid}/jobs",
                 json=dict(spec, drag={"dx": "three", "dy": 0}))
    assert bad.status_code == 422
    violations = bad.json()["detail"]["violations"]
    assert violations and all({"pointer", "message"} == set(v) for v in violations)
    assert c.post(f"/sessions/{sid}/invert", json={}).status_code == 422

    assert c.delete(f"/sessions/{sid}").status_code == 204
    assert c.get(f"/jobs/{jid}").status_code == 404
    assert c.delete(f"/sessions/{sid}").status_code == 404
    print("\nhttp contract: lifecycle, caching, 304, and 404/409/422 all "
          "verified against the live service")
