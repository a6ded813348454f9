import csv
import io
import json

import numpy as np
import pytest
from click.testing import CliRunner

from odeadj.adjoint import gradient_asm
from odeadj.bench_cli import (
    CSV_HEADER,
    ConfigError,
    ExperimentConfig,
    load_config,
    main,
    make_instance,
    observation_times,
    parse_method,
    perturb_data,
    rows_to_csv,
    run_experiment,
    sample_hiv_params,
    sample_linear_params,
    sample_rng,
    summarize,
    write_outputs,
)
from odeadj.forward_sens import gradient_se
from odeadj.models import HIV_THETA0, exact_gradient_linear, exact_hessian_linear
from odeadj.reports import max_rel_error

from conftest import HIV_U0


def _toml_list(xs):
    return "[" + ", ".join(repr(float(x)) for x in xs) + "]"


def _write(tmp_path, text, name="cfg.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_linear_sampler():
    rng = sample_rng(0, "linear", 5, 11, 0)
    th = sample_linear_params(10_000, rng)
    assert th.min() >= -1.1 and th.max() <= -0.1
    assert abs(th.mean() + 0.6) < 0.01
    a = sample_linear_params(7, sample_rng(3, "linear", 7, 11, 2))
    b = sample_linear_params(7, sample_rng(3, "linear", 7, 11, 2))
    assert np.array_equal(a, b)
    c = sample_linear_params(7, sample_rng(3, "linear", 7, 11, 3))
    assert not np.array_equal(a, c)
    with pytest.raises(ValueError):
        sample_linear_params(0, rng)


def test_hiv_sampler():
    assert HIV_THETA0[0] == 2.61 and HIV_THETA0[5] == 30 and HIV_THETA0[6] == 641
    assert HIV_THETA0[10] == 0.99
    rng = sample_rng(1, "hiv", 11, 6, 0)
    for _ in range(200):
        th = sample_hiv_params(rng)
        ratio = th / HIV_THETA0
        assert np.all(ratio[:9] >= 0.95) and np.all(ratio[:9] <= 1.05)
        assert np.all(th[9:] <= 0.999)
        assert np.all(th[9:] >= 0.95 * HIV_THETA0[9:])

    class Top:  # every uniform draw lands on the upper edge
        def uniform(self, lo, hi, size):
            return np.full(size, hi)

    th = sample_hiv_params(Top())
    # 0.99 * 1.05 = 1.0395 is projected; 0.9 * 1.05 stays below the cap
    assert th[10] == 0.999 and np.isclose(th[9], HIV_THETA0[9] * 1.05)
    assert np.isclose(th[0], 2.61 * 1.05)


def test_perturb_data():
    rng = np.random.default_rng(0)
    y = np.abs(rng.standard_normal((6, 3)))
    out = perturb_data(y, rng)
    assert np.all(out >= y)
    assert np.all(out - y <= 0.1 * y.max())
    zero = np.zeros((3, 2))
    out0 = perturb_data(zero, rng)
    assert np.array_equal(out0, zero) and out0 is not zero
    with pytest.raises(ValueError):
        perturb_data([np.nan], rng)


def test_observation_times_exclude_endpoints():
    t = observation_times(11, 100.0)
    assert t.size == 11 and t[0] > 0 and t[-1] < 100
    assert np.allclose(np.diff(t), 100 / 12, rtol=1e-14)


def test_parse_method():
    assert parse_method("asm") == ("asm", None)
    assert parse_method("smoothed(0.25)") == ("smoothed", 0.25)
    for bad in ("adjoint", "smoothed(-1)", "smoothed()", "smoothed(x)"):
        with pytest.raises(ConfigError):
            parse_method(bad)


def test_config_errors(tmp_path):
    good = 'model = "linear"\np = [2]\nn_obs = [3]\n'
    assert load_config(_write(tmp_path, good)).p == (2,)
    bad = [
        good + "colour = 1\n",
        good + "[solver]\nrtol = 1e-8\nstep = 2\n",
        'model = "linear"\nn_obs = [3]\n',
        'model = "quadratic"\np = [2]\n',
        good + "samples = 0\n",
        good + 'methods = ["sa"]\n',
        good + 'methods = ["asm", "asm"]\n',
        good + "[solver]\nrtol = -1.0\n",
        good + "[fd]\nc = 0.0\n",
        'model = "hiv"\nn_obs = [3]\n',
        'model = "hiv"\np = [2]\nn_obs = [3]\n[hiv]\nu0 = ' + _toml_list(HIV_U0) + "\n",
        'model = "hiv"\nn_obs = [3]\n[hiv]\nu0 = [1.0, 2.0]\n',
        good + "[hiv]\nu0 = " + _toml_list(HIV_U0) + "\n",
        "model = \n",
    ]
    for i, text in enumerate(bad):
        with pytest.raises(ConfigError):
            load_config(_write(tmp_path, text, f"bad{i}.toml"))
    cfg = ExperimentConfig(model="hiv", n_obs=(3,), hiv_u0=tuple(HIV_U0))
    assert cfg.p == (11,)


def test_instance_generation():
    cfg = ExperimentConfig(model="linear", p=(3,), n_obs=(4,), seed=5)
    a, b = make_instance(cfg, 3, 4, 1), make_instance(cfg, 3, 4, 1)
    assert np.array_equal(a.theta, b.theta) and np.array_equal(a.obs.values, b.obs.values)
    assert np.array_equal(a.obs.times, observation_times(4, 100.0))
    clean = np.exp(np.outer(a.obs.times, a.theta))
    assert np.all(a.obs.values >= clean)
    assert np.all(a.obs.values - clean <= 0.1 * clean.max() * (1 + 1e-12))


@pytest.fixture(scope="module")
def linear_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("lin") / "lin.csv"
    cfg = ExperimentConfig(model="linear", p=(2, 12, 22), n_obs=(11,), samples=10, seed=0,
                           methods=("se", "asm"), output=str(out))
    rows = run_experiment(cfg)
    write_outputs(cfg, rows)
    return cfg, rows


def test_linear_experiment_rows(linear_run):
    cfg, rows = linear_run
    assert len(rows) == 2 * 3 * 10
    assert all(r.status == "ok" and r.ref == "exact" and r.target == "gradient" for r in rows)
    assert all(0.0 <= r.rel_err < 1e-6 for r in rows)
    keys = [(r.p, r.method, r.sample) for r in rows]
    assert keys == sorted(keys, key=lambda k: (k[0], ("se", "asm").index(k[1]), k[2]))
    # the two gradient routes agree with each other directly
    for p in cfg.p:
        inst = make_instance(cfg, p, 11, 0)
        args = (inst.model, inst.obs, inst.metric, inst.post, inst.theta)
        assert max_rel_error(gradient_asm(*args).value, gradient_se(*args).value) < 1e-6


def test_summary_recomputable_from_csv(linear_run):
    cfg, _ = linear_run
    text = open(cfg.output).read()
    assert text.splitlines()[0] == ",".join(CSV_HEADER)
    rows = list(csv.DictReader(io.StringIO(text)))
    summary = json.loads(open(cfg.summary_path).read())
    cells = summary["cells"]
    assert len(cells) == 6
    for cell in cells:
        errs = sorted(float(r["rel_err"]) for r in rows
                      if r["method"] == cell["method"] and int(r["p"]) == cell["p"])
        n = len(errs)
        assert cell["rel_err"]["median"] == errs[int(np.ceil(0.5 * n)) - 1]
        assert cell["rel_err"]["q025"] == errs[max(int(np.ceil(0.025 * n)) - 1, 0)]
        assert cell["rel_err"]["q975"] == errs[int(np.ceil(0.975 * n)) - 1]
        assert cell["rel_err"]["median"] in errs


def test_hiv_count_ratio_trend():
    # evaluation counts stand in for wall time: deterministic and noise-free
    cfg = ExperimentConfig(model="hiv", n_obs=(2, 5, 11), samples=1, seed=3,
                           methods=("se", "asm"), hiv_u0=tuple(HIV_U0))
    rows = run_experiment(cfg)
    counts = {(r.method, r.n_obs): r.rhs_evals for r in rows}
    ratios = [counts[("se", n)] / counts[("asm", n)] for n in cfg.n_obs]
    assert ratios[0] > ratios[1] > ratios[2]
    assert all(r.ref == "se" for r in rows)
    assert max(r.rel_err for r in rows if r.method == "asm") < 1e-6


def test_csv_reproducible_and_timing_flag(tmp_path):
    text = ('model = "linear"\np = [3]\nn_obs = [4]\nsamples = 2\nseed = 11\n'
            'methods = ["fd", "asm", "sa", "smoothed(1.0)"]\ntargets = ["gradient", "hessian"]\n'
            'record_timing = false\n')
    outs = []
    for k in range(2):
        path = _write(tmp_path, text + f'output = "{tmp_path / f"r{k}.csv"}"\n', f"r{k}.toml")
        cfg = load_config(path)
        write_outputs(cfg, run_experiment(cfg))
        outs.append(open(cfg.output, "rb").read())
    assert outs[0] == outs[1]
    rows = list(csv.DictReader(io.StringIO(outs[0].decode())))
    assert {r["seconds"] for r in rows} == {"nan"}
    assert {(r["method"], r["target"]) for r in rows} == {
        ("fd", "gradient"), ("fd", "hessian"), ("asm", "gradient"), ("sa", "hessian"),
        ("smoothed(1.0)", "gradient")}
    timed = rows_to_csv(run_experiment(ExperimentConfig(p=(2,), n_obs=(2,), samples=1)))
    assert "nan" not in timed


def test_cli_validate_run_oracle(tmp_path):
    runner = CliRunner()
    out = tmp_path / "cli.csv"
    cfg = _write(tmp_path, f'model = "linear"\np = [2]\nn_obs = [3]\nsamples = 2\noutput = "{out}"\n')
    res = runner.invoke(main, ["validate", "--config", str(cfg)])
    assert res.exit_code == 0 and res.output.startswith("ok")
    res = runner.invoke(main, ["run", "--config", str(cfg), "--quiet"])
    assert res.exit_code == 0, res.output
    assert len(out.read_text().splitlines()) == 1 + 2 * 2
    assert out.with_suffix(".json").exists()
    bad = _write(tmp_path, 'model = "linear"\np = [2]\nwat = 1\n', "bad.toml")
    res = runner.invoke(main, ["validate", "--config", str(bad)])
    assert res.exit_code == 2 and "wat" in res.output
    res = runner.invoke(main, ["oracle", "--model", "linear", "--p", "3", "--n-obs", "4"])
    assert res.exit_code == 0
    data = json.loads(res.output)
    cfg = ExperimentConfig(model="linear", p=(3,), n_obs=(4,))
    inst = make_instance(cfg, 3, 4, 0)
    assert np.array_equal(data["theta"], inst.theta)
    assert np.array_equal(data["gradient"], exact_gradient_linear(inst.theta, inst.obs))
    assert np.array_equal(data["hessian"], exact_hessian_linear(inst.theta, inst.obs))


def test_summary_skips_failed_rows():
    from odeadj.bench_cli import ResultRow

    rows = [ResultRow("linear", "asm", "gradient", 2, 3, k, 0.1 * k, 10 + k, "exact", 1e-9 * k)
            for k in range(4)]
    rows.append(ResultRow("linear", "asm", "gradient", 2, 3, 4, float("nan"), None, "exact",
                          float("nan"), "error:IntegrationError"))
    (cell,) = summarize(rows)
    assert cell["samples"] == 5 and cell["ok"] == 4
    assert cell["rhs_evals"]["median"] == 11.0
    assert ",,exact,nan,error:IntegrationError" in rows_to_csv(rows)


def test_shipped_configs_load():
    from pathlib import Path

    paths = sorted((Path(__file__).parent.parent / "configs").glob("*.toml"))
    assert paths
    for path in paths:
        load_config(path)
