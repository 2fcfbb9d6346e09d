"""Acceptance criteria A1-A8. Each test prints one PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines; the full-pipeline criterion (A6) dominates the runtime.
"""

import contextlib
import json
import time

import numpy as np
import pytest
from click.testing import CliRunner

from hashquant import oracle as ngp
from hashquant.agent import DdpgAgent, DdpgConfig
from hashquant.cli import main as cli_main
from hashquant.images import checkerboard, write_ppm
from hashquant.nets import Mlp, soft_update
from hashquant.policy import QuantPolicy, parse_policy
from hashquant.quantizer import (
    ValueRange,
    dequantize_array,
    make_activation_params,
    make_weight_params,
    quantize,
    quantize_array,
)
from hashquant.search import (
    OracleEnv,
    SearchConfig,
    fqr,
    run_qat_baseline,
    run_ptq_baseline,
    run_search,
)
from hashquant.sim import HwConfig, simulate, uniform_policy_for
from hashquant.synthetic import SyntheticEnv

from conftest import ACCEPTANCE_SEED
from reference_sim import ceil_div_bandwidth, random_policy, random_trace, simulate_reference


@contextlib.contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        print(f"{name}: FAIL")
        raise
    print(f"{name}: PASS")


def test_a1_quantizer_suite():
    start = time.perf_counter()
    with criterion("A1 quantizer round-trip/monotonicity/zero-fidelity"):
        rng = np.random.default_rng(101)
        total = 0
        while total < 100_000:
            lo = float(rng.uniform(-10, 5))
            hi = lo + float(rng.uniform(1e-3, 15))
            bits = int(rng.integers(1, 9))
            vr = ValueRange(lo, hi)
            symmetric = rng.random() < 0.5
            if symmetric:
                p = make_weight_params(vr, bits)
                x = rng.uniform(-vr.span / 2, vr.span / 2, size=512)
            else:
                p = make_activation_params(vr, bits)
                x = rng.uniform(vr.v_min, vr.v_max, size=512)
            err = np.abs(dequantize_array(p, quantize_array(p, x)) - x)
            assert err.max() <= p.scale / 2 + 1e-9
            xs = np.sort(x)
            assert np.all(np.diff(quantize_array(p, xs)) >= 0)
            if symmetric:
                assert quantize(p, 0.0) == 0
            total += x.size
        elapsed = time.perf_counter() - start
        assert elapsed < 10.0, f"A1 took {elapsed:.1f}s"


def test_a2_simulator_oracle_equivalence(acceptance_training):
    start = time.perf_counter()
    with criterion("A2 simulator oracle equivalence + monotonicity"):
        rng = np.random.default_rng(202)
        cfg_small = HwConfig(grid_cache_bytes=4096, subgrid_pixels=32)
        for _ in range(100):
            trace = random_trace(rng, max_accesses=10_000, features=2)
            policy = random_policy(rng, trace)
            got = simulate(trace, policy, cfg_small)
            want = simulate_reference(trace, policy, cfg_small)
            assert got.total_cycles == want["total_cycles"]
            assert got.encoding_cycles == want["encoding_cycles"]
            assert got.mlp_cycles == want["mlp_cycles"]
            assert got.subgrid_prefetch_cycles == want["subgrid_prefetch_cycles"]
            assert got.cache_misses == want["cache_misses"]
            assert got.dram_bytes == want["dram_bytes"]

        # closed-form hand model on the all-8-bit acceptance trace
        model, _, _ = acceptance_training
        cfg = HwConfig()
        trace = ngp.export_trace(model, 128, 128)
        p8 = uniform_policy_for(trace, 8)
        report = simulate(trace, p8, cfg)
        assert report.total_cycles == _closed_form_all8(trace, cfg)

        # monotone under single-unit increases at the shipped geometry
        traces = [random_trace(rng, max_accesses=6000, features=2) for _ in range(8)]
        checked = 0
        while checked < 1000:
            t = traces[int(rng.integers(0, len(traces)))]
            policy = random_policy(rng, t)
            bits = policy.all_bits()
            idx = int(rng.integers(0, policy.num_units))
            if bits[idx] == 8:
                continue
            lo = simulate(t, policy, cfg).total_cycles
            hi = simulate(t, policy.with_unit(idx, bits[idx] + 1), cfg).total_cycles
            assert hi >= lo
            checked += 1
        elapsed = time.perf_counter() - start
        assert elapsed < 60.0, f"A2 took {elapsed:.1f}s"


def _closed_form_all8(trace, cfg):
    """Spreadsheet-style stage sums for the uniform 8-bit policy."""
    split = trace.level_count // 2
    entry_b = (trace.features_per_level * 8 + 7) // 8
    line = cfg.cache_line_bytes
    # level bases (8-bit regions, line aligned)
    bases, off = [], 0
    for l in range(trace.level_count):
        bases.append(off)
        region = int(trace.level_entry_counts[l]) * entry_b
        off += ((region + line - 1) // line) * line
    # encoding: dict-walk the coarse stream
    cache = {}
    hits = misses = 0
    fine = 0
    tiles = {}
    distinct = -1
    prev_pixel = None
    for i in range(trace.num_accesses):
        pix = int(trace.pixel_ids[i])
        lvl = int(trace.levels[i])
        if pix != prev_pixel:
            distinct += 1
            prev_pixel = pix
        if lvl < split:
            lid = (bases[lvl] + int(trace.entry_indices[i]) * entry_b) // line
            slot = lid % cfg.num_lines
            tag = lid // cfg.num_lines
            if cache.get(slot) == tag:
                hits += 1
            else:
                misses += 1
                cache[slot] = tag
        else:
            fine += 1
            tiles.setdefault(distinct // cfg.subgrid_pixels, set()).add((lvl, int(trace.entry_indices[i])))
    miss_cost = cfg.dram_fixed_latency_cycles + ceil_div_bandwidth(line, cfg.dram_bytes_per_cycle)
    encoding = hits + misses * miss_cost + fine
    prefetch = sum(ceil_div_bandwidth(len(t) * entry_b, cfg.dram_bytes_per_cycle)
                   for t in tiles.values())
    p = cfg.systolic_dim
    mlp = 0
    for j in range(len(trace.gemm_layer_ids)):
        m, k, n = int(trace.gemm_m[j]), int(trace.gemm_k[j]), int(trace.gemm_n[j])
        mlp += -(-m // p) * -(-n // p) * (k + 2 * p - 2) * 8
    return encoding + prefetch + mlp


def test_a3_oracle_quality(acceptance_training, board_128):
    with criterion("A3 oracle quality (>= 30 dB in < 10 min) + gradient check"):
        model, quality, wall = acceptance_training
        print(f"  [A3] float psnr {quality:.2f} dB, training wall time {wall:.0f}s")
        assert quality >= 30.0
        assert wall < 600.0

        small = ngp.NgpConfig(num_levels=3, features_per_level=2, table_size_log2=6,
                              base_resolution=4, growth_factor=1.5, mlp_hidden_layers=2,
                              mlp_width=8, output_channels=3)
        rng = np.random.default_rng(33)
        probe = ngp.ToyNgpModel.init(small, seed=3)
        for t in probe.tables:
            t[...] = rng.normal(0, 0.5, t.shape)
        for b in probe.biases:
            b[...] = rng.normal(0, 0.3, b.shape)
        xy = rng.random((6, 2))
        targets = rng.random((6, 3))
        _, tg, wg, bg = ngp.loss_and_grads(probe, xy, targets)
        h = 1e-4
        worst = 0.0
        for arrs, grads in ((probe.tables, tg), (probe.weights, wg), (probe.biases, bg)):
            for arr, g in zip(arrs, grads):
                for i in rng.choice(arr.size, size=min(15, arr.size), replace=False):
                    orig = arr.flat[i]
                    arr.flat[i] = orig + h
                    lp = ngp.loss_and_grads(probe, xy, targets)[0]
                    arr.flat[i] = orig - h
                    lm = ngp.loss_and_grads(probe, xy, targets)[0]
                    arr.flat[i] = orig
                    fd = (lp - lm) / (2 * h)
                    a = g.flat[i]
                    if abs(a) > 1e-9 or abs(fd) > 1e-9:
                        worst = max(worst, abs(a - fd) / max(1e-6, abs(a) + abs(fd)))
        assert worst <= 1e-3


def test_a4_quantization_trend(acceptance_training, board_128):
    with criterion("A4 quantization trend (QAT tracks float; bits ordering; PTQ/QAT latency)"):
        model, float_psnr, _ = acceptance_training
        env = OracleEnv(model, board_128, HwConfig(), finetune_seed=ACCEPTANCE_SEED)
        env.baseline(500)
        qat = {bits: run_qat_baseline(env, bits, 500) for bits in (8, 4, 2)}
        print(f"  [A4] float {float_psnr:.2f} dB | QAT8 {qat[8].psnr_cur:.2f} | "
              f"QAT4 {qat[4].psnr_cur:.2f} | QAT2 {qat[2].psnr_cur:.2f}")
        # degradation bound: 8-bit QAT may exceed the float number (it is
        # 500 extra optimization steps) but must not fall 1.5 dB below it
        assert qat[8].psnr_cur >= float_psnr - 1.5
        assert qat[8].psnr_cur >= qat[4].psnr_cur >= qat[2].psnr_cur
        ptq = run_ptq_baseline(env, 6)
        qat6 = run_qat_baseline(env, 6, 500)
        assert ptq.latency_cycles == qat6.latency_cycles
        assert qat6.psnr_cur >= ptq.psnr_cur


def test_eight_bit_forward_tracks_float(acceptance_training):
    """All-units-8-bit fake quantization stays close to the float forward on
    the trained reference model. Measured worst-case per-channel deviation on
    this seeded probe set is 0.0379 (the error concentrates where the sigmoid
    is steepest); the bound is frozen just above it."""
    model, _, _ = acceptance_training
    probe = np.random.default_rng(44).random((256, 2))
    p8 = QuantPolicy.uniform(8, model.config.num_levels, model.config.num_mlp_layers)
    delta = np.abs(ngp.forward(probe, model, p8) - ngp.forward(probe, model))
    assert delta.max() <= 0.04
    assert np.mean(delta) <= 0.002


def test_a5_rl_toy_optimality():
    start = time.perf_counter()
    with criterion("A5 toy-scale search within 5% of exhaustive optimum (3 seeds)"):
        probe = SyntheticEnv()
        best_bits, best_reward = probe.exhaustive_optimum()
        assert best_bits == (1, 1, 4, 2)
        for seed in (1, 2, 3):
            env = SyntheticEnv()
            agent = DdpgAgent(DdpgConfig(seed=seed, updates_per_episode=8,
                                         noise_floor=0.1, noise_decay=0.995))
            report = run_search(env, agent, SearchConfig(
                episodes=500, finetune_steps=0, warmup_episodes=64, seed=seed + 100))
            frac = report.best["reward"] / best_reward
            print(f"  [A5] seed {seed}: best {report.best['policy']} at {frac:.1%} of optimum")
            assert report.best["reward"] >= 0.95 * best_reward
        elapsed = time.perf_counter() - start
        assert elapsed < 300.0, f"A5 took {elapsed:.1f}s"


def test_a6_end_to_end_trend(acceptance_training, board_128):
    start = time.perf_counter()
    with criterion("A6 end-to-end search beats the uniform 8-bit baseline"):
        model, _, _ = acceptance_training
        env = OracleEnv(model, board_128, HwConfig(), finetune_seed=ACCEPTANCE_SEED)
        agent = DdpgAgent(DdpgConfig(seed=6))
        config = SearchConfig(episodes=200, finetune_steps=500, warmup_episodes=8, seed=60)
        report = run_search(env, agent, config)
        base = report.baseline
        final = report.final
        best_policy = parse_policy(report.best["policy"])
        print(f"  [A6] baseline {base['psnr_org']:.2f} dB @ {base['original_cost']} cycles")
        print(f"  [A6] best {report.best['policy']}")
        print(f"  [A6] final {final['psnr_cur']:.2f} dB @ {final['latency_cycles']} cycles, "
              f"fqr {final['fqr']:.2f}, eff {final['cost_efficiency']:.2f} "
              f"(baseline eff {base['cost_efficiency']:.2f})")
        assert fqr(best_policy) < 8.0
        assert final["latency_cycles"] < base["original_cost"]
        assert base["psnr_org"] - final["psnr_cur"] <= 1.5
        assert final["cost_efficiency"] > base["cost_efficiency"]

        # resource-constrained mode stays within its cycle budget
        mgl_env = OracleEnv(model, board_128, HwConfig(), finetune_seed=ACCEPTANCE_SEED)
        mgl_agent = DdpgAgent(DdpgConfig(seed=7))
        mgl_cfg = SearchConfig(episodes=12, mode="MGL", latency_budget_ratio=0.83,
                               finetune_steps=500, warmup_episodes=4, seed=61)
        mgl = run_search(mgl_env, mgl_agent, mgl_cfg)
        budget = mgl.budget["budget_cycles"]
        assert mgl.budget["budget_unreachable"] is False
        assert all(e["latency_cycles"] <= budget for e in mgl.episodes)
        assert mgl.best["latency_cycles"] <= budget
        print(f"  [A6] MGL budget {budget} cycles, best {mgl.best['policy']} "
              f"@ {mgl.best['latency_cycles']} cycles")
        elapsed = time.perf_counter() - start
        print(f"  [A6] wall time {elapsed / 60:.1f} min")
        assert elapsed < 3600.0


def test_a7_ddpg_mechanics():
    start = time.perf_counter()
    with criterion("A7 DDPG mechanics (EMA, soft update, bandit)"):
        agent = DdpgAgent(DdpgConfig(seed=0, ema_decay=0.95))
        agent.observe_reward(0.1)
        agent.observe_reward(0.2)
        assert agent.ema_baseline == pytest.approx(0.105)
        for _ in range(500):
            agent.observe_reward(0.42)
        assert abs(agent.ema_baseline - 0.42) < 1e-6

        rng = np.random.default_rng(1)
        main = Mlp((4, 8, 1), rng)
        target = Mlp((4, 8, 1), np.random.default_rng(2))
        d0 = [np.linalg.norm(t - m) for t, m in zip(target.params, main.params)]
        for _ in range(100):
            soft_update(target, main, 0.01)
        for base, (t, m) in zip(d0, zip(target.params, main.params)):
            assert np.linalg.norm(t - m) == pytest.approx(0.99**100 * base, rel=1e-9)

        bandit = DdpgAgent(DdpgConfig(seed=5, actor_lr=1e-3, critic_lr=1e-2,
                                      noise_sigma=0.3, noise_decay=1.0, replay_capacity=512))
        from hashquant.agent import LayerObservation, Transition
        obs = LayerObservation(raw=np.full(7, 0.5))
        for _ in range(2000):
            a = bandit.select_action(obs, explore=True)
            bandit.replay.push(Transition(obs=obs, action=a, reward=-((a - 0.75) ** 2),
                                          next_obs=None, done=True))
            if len(bandit.replay) >= 32:
                bandit.update(bandit.replay.sample(bandit.sample_rng, 32))
        mu = bandit.select_action(obs, explore=False)
        print(f"  [A7] bandit converged to {mu:.3f}")
        assert mu == pytest.approx(0.75, abs=0.05)
        elapsed = time.perf_counter() - start
        assert elapsed < 120.0, f"A7 took {elapsed:.1f}s"


A8_CONFIG = """
[oracle]
image = "board.ppm"
train_steps = 80
seed = 7
num_levels = 4
table_size_log2 = 8
base_resolution = 4
growth_factor = 1.8
mlp_hidden_layers = 1
mlp_width = 8

[hardware]
subgrid_pixels = 64

[agent]
seed = 11

[search]
episodes = 3
finetune_steps = 8
warmup_episodes = 1
seed = 13

[output]
dir = "out"
"""


def test_a8_command_determinism(tmp_path):
    with criterion("A8 byte-identical reruns for every command"):
        write_ppm(tmp_path / "board.ppm", checkerboard(32, 4))
        (tmp_path / "run.toml").write_text(A8_CONFIG)
        runner = CliRunner()
        cfg = str(tmp_path / "run.toml")

        def run(*args):
            res = runner.invoke(cli_main, [str(a) for a in args])
            assert res.exit_code == 0, res.output
            return res

        tracked = ["out/oracle.hngp", "out/train_log.csv", "out/report.json",
                   "out/episodes.csv", "out/best_policy.json", "out/trace.htrc",
                   "out/baseline_ptq6.json", "out/baseline_qat6.json",
                   "plots/pareto.csv", "plots/reward_curve.csv",
                   "sim/sim_report.json"]

        def run_all():
            run("train-oracle", "--config", cfg)
            run("search", "--config", cfg)
            run("baseline", "--config", cfg, "--kind", "ptq", "--bits", 6)
            run("baseline", "--config", cfg, "--kind", "qat", "--bits", 6)
            run("simulate", tmp_path / "out" / "trace.htrc",
                tmp_path / "out" / "best_policy.json", "--out", tmp_path / "sim")
            run("plotdata", tmp_path / "out" / "report.json", "--out", tmp_path / "plots")
            return {name: (tmp_path / name).read_bytes() for name in tracked}

        first = run_all()
        second = run_all()
        for name in tracked:
            assert first[name] == second[name], f"{name} differs between reruns"
