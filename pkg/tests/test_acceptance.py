"""End-to-end acceptance checks, one test group per numbered criterion.

A summary line per criterion (PASS/FAIL plus measurements) is printed at the
end of the pytest run by the hook in conftest.py.
"""
import time

import numpy as np
import pytest
import torch

from mlr.agents import SACAgent, SACConfig, project_distribution
from mlr.agents.tabular import run_tabular
from mlr.config import load_config
from mlr.decoder import DecoderConfig, LatentDecoder, layer_parameter_count, sinusoidal_table, zero_residual_branches
from mlr.evaluation import hns, iqm, optimality_gap, performance_profile
from mlr.gradcheck import finite_difference_check
from mlr.nets import Encoder, EncoderConfig, HeadConfig, MomentumPair, ema_update
from mlr.objective import MLRConfig, build_objective, mlr_loss
from mlr.pixelops import AugmentSpec, CubeMaskSpec, apply_mask, sample_mask
from mlr.runner import ABLATIONS, GRIDS, read_log, run_ablation, run_train, write_ablation
from oracles import brute_iqm, brute_og, brute_profile


# 1 ---------------------------------------------------------------------------

def test_criterion_01_masking_exactness(note):
    spec = CubeMaskSpec(8, 10, 10, 0.5)
    rng = np.random.default_rng(0)
    seq = rng.random((16, 3, 84, 84), dtype=np.float32)
    start = time.perf_counter()
    counts = set()
    for _ in range(1000):
        plan = sample_mask(spec, 16, 84, 84, rng)
        out = apply_mask(seq, plan, spec)
        keep = ~np.broadcast_to(plan.pixel_mask[:, None], seq.shape)
        assert plan.grid.size == 162
        counts.add(int(plan.grid.sum()))
        assert np.array_equal(out[keep], seq[keep])
    elapsed = time.perf_counter() - start
    note(f"masked cells per draw: {sorted(counts)} of 162; {elapsed:.2f}s for 1000 draws")
    assert counts == {81}
    assert elapsed < 5.0


# 2 ---------------------------------------------------------------------------

def _tiny_objective(dtype=torch.float32, seed=0):
    torch.manual_seed(seed)
    cfg = MLRConfig(K=4, mask=CubeMaskSpec(2, 4, 4, 0.5), heads=HeadConfig(projection_dim=4, hidden_dim=8),
                    decoder_layers=1, augment=AugmentSpec(out_size=(16, 16), crop_margin=2))
    enc = Encoder(EncoderConfig(obs_shape=(3, 16, 16), num_filters=2, latent_dim=4))
    obj = build_objective(cfg, enc, m=0.9, action_dim=2, source_shape=(3, 16, 16))
    if dtype == torch.float64:
        obj.double()
        enc.double()
        obj.momentum_encoder.double()
    return obj


def test_criterion_02_loss_range(note):
    start = time.perf_counter()
    obj = _tiny_objective()
    rng = np.random.default_rng(0)
    lo, hi = np.inf, -np.inf
    for i in range(100):
        obs = torch.as_tensor(rng.random((100, 4, 3, 16, 16), dtype=np.float32))
        act = torch.as_tensor(rng.uniform(-1, 1, (100, 4, 2)).astype(np.float32))
        with torch.no_grad():
            if i % 10 == 0:  # fresh random networks as well as fresh inputs
                obj = _tiny_objective(seed=i)
            rep = mlr_loss(obj, obs, act, rng, rng)
        lo, hi = min(lo, rep.loss), max(hi, rep.loss)
        assert 0.0 <= rep.loss <= 2.0
    note(f"loss over 10,000 random windows in [{lo:.4f}, {hi:.4f}]; {time.perf_counter() - start:.1f}s")


def test_criterion_02_end_to_end_gradcheck(note):
    start = time.perf_counter()
    obj = _tiny_objective(torch.float64)
    g = torch.Generator().manual_seed(0)
    obs = torch.rand(2, 4, 3, 16, 16, dtype=torch.float64, generator=g)
    act = torch.rand(2, 4, 2, dtype=torch.float64, generator=g)

    def loss():
        return mlr_loss(obj, obs, act, np.random.default_rng(1), np.random.default_rng(2)).tensor

    params = list(obj.encoder.parameters()) + obj.online_parameters()
    err = finite_difference_check(loss, params, eps=1e-6)
    elapsed = time.perf_counter() - start
    note(f"max relative gradient error {err:.2e} over {sum(p.numel() for p in params)} parameters; "
         f"{elapsed:.1f}s")
    assert err <= 1e-4
    assert elapsed < 120


# 3 ---------------------------------------------------------------------------

def test_criterion_03_ema_formula(note):
    torch.manual_seed(0)
    pair = MomentumPair(Encoder(EncoderConfig(obs_shape=(3, 16, 16), num_filters=4, latent_dim=8)).double(), 0.95)
    with torch.no_grad():
        for p in pair.online.parameters():
            p.add_(torch.randn_like(p))
    before = [p.clone() for p in pair.momentum.parameters()]
    ema_update(pair)
    worst = 0.0
    for b, o, m in zip(before, pair.online.parameters(), pair.momentum.parameters()):
        expected = 0.95 * b + 0.05 * o
        worst = max(worst, ((m - expected).abs().max() / expected.abs().max()).item())
    note(f"max EMA relative error {worst:.1e}")
    assert worst <= 1e-12


def _named(module, prefix):
    return {f"{prefix}.{n}": p.detach().clone() for n, p in module.named_parameters()}


def test_criterion_03_momentum_untouched_without_ema():
    obj = _tiny_objective()
    frozen = {**_named(obj.momentum_encoder, "enc"), **_named(obj.momentum_projection, "proj")}
    opt = torch.optim.Adam(list(obj.encoder.parameters()) + obj.online_parameters(), lr=1e-2)
    rng = np.random.default_rng(0)
    for _ in range(100):
        obs = torch.as_tensor(rng.random((4, 4, 3, 16, 16), dtype=np.float32))
        act = torch.as_tensor(rng.uniform(-1, 1, (4, 4, 2)).astype(np.float32))
        opt.zero_grad()
        mlr_loss(obj, obs, act, rng, rng).tensor.backward()
        opt.step()
    now = {**_named(obj.momentum_encoder, "enc"), **_named(obj.momentum_projection, "proj")}
    assert all(torch.equal(frozen[k], now[k]) for k in frozen)


def test_criterion_03_one_step_changes_only_online_modules(note):
    torch.manual_seed(0)
    enc = Encoder(EncoderConfig(obs_shape=(3, 16, 16), num_filters=4, latent_dim=8))
    mcfg = MLRConfig(K=4, mask=CubeMaskSpec(2, 4, 4, 0.5), heads=HeadConfig(projection_dim=4, hidden_dim=8),
                     decoder_layers=1, augment=AugmentSpec(out_size=(16, 16), crop_margin=2),
                     warmup_steps=0, lr=1e-3)
    agent = SACAgent(SACConfig(hidden_dim=16), enc, action_dim=2, augment=mcfg.augment, mlr=mcfg)
    groups = {"encoder": agent.encoder, "decoder": agent.mlr.decoder,
              "projection": agent.mlr.heads.projection, "prediction": agent.mlr.heads.prediction,
              "momentum_encoder": agent.encoders.momentum, "momentum_projection": agent.mlr.momentum_projection,
              "critic": agent.critics.online, "critic_target": agent.critics.momentum, "actor": agent.actor}
    before = {g: _named(m, g) for g, m in groups.items()}
    alpha = agent.log_alpha.detach().clone()
    rng = np.random.default_rng(0)
    obs = torch.as_tensor(rng.random((4, 4, 3, 16, 16), dtype=np.float32))
    act = torch.as_tensor(rng.uniform(-1, 1, (4, 4, 2)).astype(np.float32))
    agent.critic_opt.zero_grad()
    mlr_loss(agent.mlr, obs, act, rng, rng).tensor.backward()
    agent.critic_opt.step()
    changed = set()
    for g, m in groups.items():
        after = _named(m, g)
        if any(not torch.equal(before[g][k], after[k]) for k in after):
            changed.add(g)
    note(f"modules changed by one auxiliary step: {sorted(changed)}")
    assert changed == {"encoder", "decoder", "projection", "prediction"}
    assert torch.equal(alpha, agent.log_alpha.detach())


# 4 ---------------------------------------------------------------------------

def test_criterion_04_degenerate_chain(note):
    torch.manual_seed(0)
    cfg = MLRConfig(K=4, mask=CubeMaskSpec(2, 4, 4, 0.0), heads=HeadConfig(projection=False, prediction=False),
                    decoder_layers=2, positional=False,
                    augment=AugmentSpec(out_size=(16, 16), crop=False, intensity=False))
    enc = Encoder(EncoderConfig(obs_shape=(3, 16, 16), num_filters=4, latent_dim=8))
    obj = build_objective(cfg, enc, m=0.95, action_dim=2)
    with torch.no_grad():  # move the online encoder, then resynchronise
        for p in enc.parameters():
            p.add_(0.1)
    ema_update(obj._encoders, 0.0)
    obj.sync_momentum()
    zero_residual_branches(obj.decoder)
    rng = np.random.default_rng(0)
    obs = torch.as_tensor(rng.random((3, 4, 3, 16, 16), dtype=np.float32))
    act = torch.as_tensor(rng.uniform(-1, 1, (3, 4, 2)).astype(np.float32))
    loss = mlr_loss(obj, obs, act, rng, rng).loss
    note(f"loss {loss:.2e}")
    assert loss < 1e-6


# 5 ---------------------------------------------------------------------------

def test_criterion_05_metric_oracles(note):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(500):
        x = rng.normal(size=rng.integers(1, 200)) * rng.uniform(0.1, 100)
        worst = max(worst, abs(iqm(x) - brute_iqm(x)))
    assert worst <= 1e-9
    for _ in range(100):
        # dyadic scores keep every sum exact, so the comparison is exact
        x = rng.integers(-256, 512, size=(int(rng.integers(1, 6)), int(rng.integers(1, 8)))) / 128
        taus = np.sort(rng.integers(-256, 512, size=20) / 128)
        assert optimality_gap(x) == brute_og(x)
        assert np.array_equal(performance_profile(x, taus), brute_profile(x, taus))
    alien = hns(990.1, 227.8, 7127.7)
    elapsed = time.perf_counter() - start
    note(f"IQM max deviation {worst:.1e}; HNS(Alien) {alien:.5f}; {elapsed:.2f}s")
    assert abs(alien - 0.1105) <= 1e-4
    assert elapsed < 10


# 6 ---------------------------------------------------------------------------

def test_criterion_06_decoder_parameter_counts(note):
    cfg = load_config()
    counts = {}
    for depth, expected in ((1, 20_400), (2, 40_800), (4, 81_600), (8, 163_200)):
        dec = LatentDecoder(DecoderConfig(layers=depth, width=cfg["encoder.latent_dim"],
                                          n_heads=cfg["decoder.heads"], mlp_ratio=cfg["decoder.mlp_ratio"]),
                            action_dim=1)
        counts[depth] = dec.layer_parameters()
        assert abs(counts[depth] - expected) <= 0.01 * expected
        assert layer_parameter_count(50, cfg["decoder.mlp_ratio"], depth) == counts[depth]
    note("parameters per depth: " + ", ".join(f"{d}: {c}" for d, c in counts.items()))


# 7 ---------------------------------------------------------------------------

def test_criterion_07_positional_table():
    d = 50
    table = sinusoidal_table(16, d)
    for pos in range(16):
        for i in range(d):
            angle = pos / 10000 ** (2 * (i // 2) / d)
            assert table[pos, i] == (np.sin(angle) if i % 2 == 0 else np.cos(angle))
    assert table[0].tolist() == [0.0, 1.0] * (d // 2)


# 8 ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["sac", "rainbow"])
def test_criterion_08_tabular_agents(kind, note):
    start = time.perf_counter()
    q, q_star, used = run_tabular(kind, updates=5000, seed=0)
    err = float(np.abs(q - q_star).max())
    elapsed = time.perf_counter() - start
    note(f"{kind}: max |Q - Q*| {err:.4f} after {used} updates; {elapsed:.1f}s")
    assert used <= 5000 and err <= 0.05
    assert elapsed < 150  # two agents share the 5 minute budget


def test_criterion_08_projection_mass(note):
    g = torch.Generator().manual_seed(0)
    support = torch.linspace(-10, 10, 51, dtype=torch.float64)
    probs = torch.softmax(torch.randn(10_000, 51, generator=g, dtype=torch.float64), -1)
    returns = torch.randn(10_000, generator=g, dtype=torch.float64) * 10
    discounts = torch.rand(10_000, generator=g, dtype=torch.float64)
    out = project_distribution(probs, returns, discounts, support)
    err = (out.sum(-1) - 1).abs().max().item()
    note(f"projection mass error {err:.1e}")
    assert err <= 1e-9


# 9 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_09_directional_benefit(tmp_path, note):
    from mlr.objective import regression_accuracy

    start = time.perf_counter()
    seeds = range(5)
    finals, sims = {"MLR": [], "baseline": []}, {"MLR": [], "baseline": []}
    for seed in seeds:
        runs = {}
        for label, lam in (("MLR", 1.0), ("baseline", 0.0)):
            cfg = load_config(overrides={"preset": "desk", "mlr.lambda": lam})
            res = run_train(cfg, seed=seed, out=tmp_path / label / f"seed{seed}")
            finals[label].append(res.final_eval)
            runs[label] = res.extra["trainer"]
        # both encoders are scored on the same frames: the baseline run's replay data
        shared = runs["baseline"].buffer
        for label, trainer in runs.items():
            cfg = trainer.cfg
            sims[label].append(regression_accuracy(trainer.agent.encoder, shared, 256, cfg.mask_spec(),
                                                   cfg["mlr.K"], np.random.default_rng(seed),
                                                   out_size=(cfg["env.obs_size"],) * 2))
    elapsed = time.perf_counter() - start
    for label in finals:
        note(f"{label}: final returns {[round(v, 1) for v in finals[label]]} "
             f"(mean {np.mean(finals[label]):.1f}); similarity {[round(v, 3) for v in sims[label]]}")
    note(f"{elapsed / 3600:.2f} h for 10 runs")
    assert np.mean(finals["MLR"]) >= np.mean(finals["baseline"])
    assert all(a > b for a, b in zip(sims["MLR"], sims["baseline"]))
    assert elapsed <= 6 * 3600


# 10 --------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_10_ablation_reachability(tmp_path, note):
    start = time.perf_counter()
    cfg = load_config(overrides={"preset": "smoke"})
    assert cfg["run.total_env_steps"] == 1000
    rows = []
    for name, grid in GRIDS.items():
        rows += run_ablation(cfg, grid, seeds=[0], out=tmp_path / name)
    covered = {label for grid in GRIDS.values() for label in grid.get("variant", [])}
    assert covered == set(ABLATIONS)
    path = write_ablation(rows, tmp_path)
    table = path.read_text()
    failed = [r.label for r in rows if r.error or len(r.scores) != 1]
    elapsed = time.perf_counter() - start
    note(f"{len(rows)} cells, {len(failed)} failed; {elapsed / 60:.1f} min")
    assert not failed, failed
    assert table.count("\n") == len(rows) + 2
    assert elapsed < 30 * 60


# 11 --------------------------------------------------------------------------

TOY = {"preset": "smoke", "run.total_env_steps": 2000, "run.eval_every": 500}


def test_criterion_11_identical_runs(tmp_path):
    cfg = load_config(overrides=TOY)
    a = run_train(cfg, seed=0, out=tmp_path / "a")
    b = run_train(cfg, seed=0, out=tmp_path / "b")
    assert len(read_log(a.log_path)) > 0
    assert a.log_path.read_bytes() == b.log_path.read_bytes()


def test_criterion_11_resume_matches_uninterrupted(tmp_path, note):
    cfg = load_config(overrides=TOY)
    full = run_train(cfg, seed=0, out=tmp_path / "full")
    part = run_train(cfg, seed=0, out=tmp_path / "resumed", stop_at=1000)
    assert part.interrupted and part.env_steps >= 1000
    resumed = run_train(cfg, seed=0, out=tmp_path / "resumed", resume=part.checkpoint)
    n = len(read_log(full.log_path))
    note(f"{n} log records, resumed at env step {part.env_steps}")
    assert resumed.log_path.read_bytes() == full.log_path.read_bytes()
