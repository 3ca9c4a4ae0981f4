"""Experiment configuration, orchestration, persistence, and determinism."""

import hashlib
import json

import pytest

from ldpbandit.runner import (
    ConfigError,
    ExperimentConfig,
    build_env,
    config_hash,
    run_experiment,
)


def mad_config(**over):
    base = {
        "experiment": "mad_curve",
        "seed": 5,
        "replications": 3,
        "alpha": 1.0,
        "estimators": ["ip_ridge"],
        "design": {"kind": "two_point",
                   "points": [[0.88, 0.3], [0.88, -0.3]]},
        "theta": [0.5, 0.3],
        "n_grid": [64, 128, 256, 512],
        "gates": {},
    }
    base.update(over)
    return base


# ---------------------------------------------------------------------------
# Config validation and hashing
# ---------------------------------------------------------------------------

def test_config_normalization_defaults():
    cfg = ExperimentConfig.from_dict(mad_config())
    assert cfg.kind == "mad_curve"
    assert cfg.label == "mad_curve"            # defaults to the kind
    assert cfg.section("design")["probs"] == [0.5, 0.5]
    assert cfg.replications == 3
    assert len(cfg.hash) == 16


def test_config_hash_is_order_independent_and_value_sensitive():
    a = ExperimentConfig.from_dict(mad_config())
    shuffled = dict(reversed(list(mad_config().items())))
    b = ExperimentConfig.from_dict(shuffled)
    assert a.hash == b.hash
    c = ExperimentConfig.from_dict(mad_config(seed=6))
    assert c.hash != a.hash


def test_config_hash_matches_canonical_json_digest():
    payload = {"b": [1, 2], "a": 1}
    want = hashlib.sha256(b'{"a":1,"b":[1,2]}').hexdigest()[:16]
    assert config_hash(payload) == want


@pytest.mark.parametrize("mangle", [
    {"experiment": "unknown_kind"},
    {"seed": -1},
    {"seed": "zero"},
    {"replications": 0},
    {"alpha": 1.5},
    {"alpha": 0.0},
    {"n_grid": [256, 128]},
    {"n_grid": []},
    {"estimators": ["nearest_neighbor"]},
    {"estimators": []},
    {"design": {"kind": "nope"}},
    {"design": {"kind": "mad_thm2", "c": -1.0}},
    {"design": {"kind": "mad_thm2", "extra": 1}},
    {"surprise": True},
    {"gates": [1, 2]},
    {"label": ""},
])
def test_invalid_configs_are_rejected(mangle):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(mad_config(**mangle))


def test_lplr_estimator_requires_an_oracle_spec():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(mad_config(estimators=["lplr"]))
    with_oracle = mad_config(
        estimators=["lplr"],
        oracle={"d": 2, "T": 16, "beta": 0.25, "delta": 0.05,
                "kappa1": 0.05, "kappa1p": 0.05, "kappa2": 0.05,
                "kappa3": 0.01})
    assert ExperimentConfig.from_dict(with_oracle).section("oracle")["d"] == 2


def test_oracle_spec_validation():
    def oracle(**over):
        base = {"d": 2, "T": 16, "beta": 0.25, "delta": 0.05,
                "kappa1": 0.05, "kappa1p": 0.05, "kappa2": 0.05,
                "kappa3": 0.01}
        base.update(over)
        return mad_config(estimators=["lplr"], oracle=base)

    for bad in ({"d": 0}, {"T": 1}, {"beta": 0.0}, {"delta": 1.0},
                {"kappa1": 0.0}, {"kappa2": -1.0}, {"n0": 0},
                {"mystery": 1}):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(oracle(**bad))
    # paper mode needs no kappas; the horizon-derived delta form is accepted
    cfg = ExperimentConfig.from_dict(mad_config(
        estimators=["lplr"],
        oracle={"d": 2, "T": 16, "beta": 0.25, "delta": "1/T^2",
                "paper_mode": True}))
    assert cfg.section("oracle")["paper_mode"] is True


def test_env_and_policy_spec_validation():
    def regret(**over):
        base = {
            "experiment": "regret_curve", "seed": 0, "replications": 1,
            "alpha": 1.0,
            "env": {"kind": "mirror", "c1": 0.6, "c2": 0.2,
                    "theta": [0.0, 1.0]},
            "policies": [{"name": "suffstat_ucb"}],
            "T_grid": [16, 32, 64, 128], "gates": {},
        }
        base.update(over)
        return base

    assert ExperimentConfig.from_dict(regret()).kind == "regret_curve"
    for bad_env in ({"kind": "maze"},
                    {"kind": "mirror", "c1": 0.6, "c2": 0.2,
                     "theta": [1.0]},
                    {"kind": "mirror", "c1": 0.6, "c2": 0.2,
                     "theta": [0.0, 1.0], "bonus": 1},
                    {"kind": "case2_mirror", "c": -1.0, "theta": [0, 1]},
                    {"kind": "random", "n_contexts": 0, "A": 2, "d": 2}):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(regret(env=bad_env))
    for bad_pols in ([], [{"name": "thompson"}],
                     [{"name": "suffstat_ucb"}, {"name": "suffstat_ucb"}],
                     [{"name": "suffstat_ucb", "config": {"exotic": 1}}],
                     [{"name": "lplr_elimination"}]):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(regret(policies=bad_pols))


def test_case2_mirror_env_needs_a_horizon():
    spec = {"kind": "case2_mirror", "c": 2.0, "theta": [0.0, 1.0],
            "noise": "binary"}
    with pytest.raises(ConfigError):
        build_env(spec)
    env = build_env(spec, T=64)
    assert env.name == "case2_mirror_T64"
    # the spread parameter shrinks with the horizon: gap = 2 c2 theta2
    wide = build_env(spec, T=16)
    assert wide.features[0, 0, 1] > env.features[0, 0, 1]


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

def test_invalid_config_leaves_no_output(tmp_path):
    out = tmp_path / "never"
    with pytest.raises(ConfigError):
        run_experiment({"experiment": "bogus"}, out)
    assert not out.exists()


def test_zero_noise_is_refused_unless_allowed(tmp_path):
    cfg = mad_config()
    with pytest.raises(ConfigError):
        run_experiment(cfg, tmp_path / "refused", zero_noise=True)
    assert not (tmp_path / "refused").exists()
    allowed = mad_config(allow_zero_noise=True)
    summary = run_experiment(allowed, tmp_path / "ok", zero_noise=True)
    assert summary["zero_noise"] is True


def test_selftest_experiment_writes_expected_files(tmp_path):
    out = tmp_path / "self"
    summary = run_experiment(
        {"experiment": "mechanism_selftest", "seed": 0, "n_draws": 10_000},
        out)
    assert (out / "results.csv").exists()
    assert (out / "summary.json").exists()
    header = (out / "results.csv").read_text().splitlines()[0]
    assert header == "check,statistic,threshold,ok"
    assert set(summary["gates"]) == {"moments_ok", "certificates_ok"}
    assert summary["gates_passed"] is True
    on_disk = json.loads((out / "summary.json").read_text())
    assert on_disk["config_hash"] == summary["config_hash"]
    with pytest.raises(ConfigError):
        run_experiment({"experiment": "mechanism_selftest", "n_draws": 100},
                       tmp_path / "tiny")


def test_same_seed_reruns_are_byte_identical(tmp_path):
    cfg = mad_config()
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    run_experiment(mad_config(seed=6), tmp_path / "c")
    bytes_a = (tmp_path / "a" / "results.csv").read_bytes()
    bytes_b = (tmp_path / "b" / "results.csv").read_bytes()
    bytes_c = (tmp_path / "c" / "results.csv").read_bytes()
    assert bytes_a == bytes_b
    assert bytes_a != bytes_c


def test_regret_experiment_writes_traces_and_slopes(tmp_path):
    cfg = {
        "experiment": "regret_curve", "seed": 1, "replications": 2,
        "alpha": 1.0,
        "env": {"kind": "mirror", "c1": 0.6, "c2": 0.2,
                "theta": [0.0, 1.0]},
        "policies": [{"name": "suffstat_ucb"},
                     {"name": "exact_oracle"}],
        "T_grid": [16, 32, 64, 128], "gates": {},
    }
    out = tmp_path / "regret"
    summary = run_experiment(cfg, out)
    pols = summary["results"]["policies"]
    assert set(pols) == {"suffstat_ucb", "exact_oracle"}
    assert len(pols["suffstat_ucb"]["mean_final_regret"]) == 4
    assert (out / "traces" / "trace_suffstat_ucb_T128.csv").exists()
    trace_lines = (out / "traces" / "trace_exact_oracle_T128.csv") \
        .read_text().splitlines()
    assert trace_lines[0] == "t,cum_regret,active_set_size,epoch"
    assert len(trace_lines) == 129
    rows = (out / "results.csv").read_text().splitlines()
    assert rows[0] == "policy,T,rep,final_regret"
    assert len(rows) == 1 + 2 * 4 * 2
