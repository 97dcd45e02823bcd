import csv
import math
import warnings

import numpy as np
import pytest

from uapic.fields import ConfigurationError, make_field
from uapic.harness import experiments as ex
from uapic.harness import rk4_reference, reference_solution
from uapic.harness.cli import main
from uapic.harness.reference import OracleWarning


def test_rk4_one_period_uniform_field():
    fs = make_field("uniform")
    eps = 0.1
    v0 = np.array([0.3, -0.4, 0.5])
    x, v = rk4_reference(np.zeros(3), v0, fs, eps, 2 * math.pi * eps, dt=2 * math.pi * eps / 4000)
    assert np.allclose(v, v0, atol=1e-10)
    assert np.allclose(x, [0, 0, 0.5 * 2 * math.pi * eps], atol=1e-10)


def test_rk4_is_fourth_order(ex1, x0, v0):
    eps, T = 2.0 ** -4, 0.5
    ref = reference_solution(x0, v0, ex1, eps, T)
    e = [np.linalg.norm(rk4_reference(x0, v0, ex1, eps, T, h)[0] - ref[0]) for h in (2e-3, 1e-3)]
    assert 13 < e[0] / e[1] < 19


def test_oracles_agree(ex1, x0, v0):
    eps, T = 2.0 ** -4, math.pi / 2
    a = rk4_reference(x0, v0, ex1, eps, T, 1e-4)
    b = reference_solution(x0, v0, ex1, eps, T)
    c = reference_solution(x0, v0, ex1, eps, T, steps_per_radian=32)
    assert np.allclose(a[0], b[0], atol=1e-10) and np.allclose(b[0], c[0], atol=1e-12)
    assert np.allclose(b[1], c[1], atol=1e-12)


def test_rk4_warns_when_unresolved(ex1, x0, v0):
    with pytest.warns(OracleWarning):
        rk4_reference(x0, v0, ex1, 0.01, 0.01, dt=0.01)


def test_oracle_conserves_energy(ex1, x0, v0):
    rec = reference_solution(x0, v0, ex1, 2.0 ** -6, math.pi, record_every=100)
    H = [ex.energy(ex1, r[:3], r[3:]) for r in rec]
    assert np.max(np.abs(np.array(H) - H[0])) / abs(H[0]) < 1e-10


def test_rk4_vs_itself_is_zero(ex1):
    cfg = ex.ExperimentConfig(scheme="rk4", eps=(0.5,), steps=(4000,))
    ref = {0.5: rk4_reference(cfg.x0, cfg.v0, ex1, 0.5, cfg.tfinal, cfg.tfinal / 4000)}
    (rec,) = ex.convergence_sweep(cfg, refs=ref)
    assert rec.error == 0.0


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# comment\nscheme = tsf\neps = 2^-1, 2^-4\nsteps=8,16\ntfinal = 32pi\n"
                    "restart-period = 8pi\n")
    cfg = ex.load_config(str(path), steps="4")
    assert cfg.scheme == "tsf" and cfg.eps == (0.5, 0.0625) and cfg.steps == (4,)
    assert cfg.tfinal == pytest.approx(32 * math.pi)
    assert cfg.restart_period == pytest.approx(8 * math.pi)
    assert ex.load_config(tfinal="pi/2").tfinal == pytest.approx(math.pi / 2)
    with pytest.raises(ConfigurationError):
        ex.parse_config_text("nonsense = 1")
    with pytest.raises(ConfigurationError):
        ex.parse_config_text("no equals sign")
    with pytest.raises(ConfigurationError):
        ex.load_config(eps="2")


def test_config_hash_changes_with_content():
    a = ex.ExperimentConfig()
    assert a.config_hash() == ex.ExperimentConfig().config_hash()
    assert a.config_hash() != ex.ExperimentConfig(seed=1).config_hash()


def test_incompatible_scheme_field():
    cfg = ex.ExperimentConfig(scheme="tsf", field="example2")
    with pytest.raises(ConfigurationError):
        ex.convergence_sweep(cfg, refs={0.5: (np.ones(3), np.ones(3))})


def test_worker_env(monkeypatch):
    monkeypatch.setenv(ex.WORKERS_ENV, "3")
    assert ex.worker_count() == 3
    monkeypatch.setenv(ex.WORKERS_ENV, "x")
    with pytest.raises(ConfigurationError):
        ex.worker_count()


def test_sweep_deterministic_across_workers(monkeypatch):
    cfg = ex.ExperimentConfig(scheme="mrc,mm", eps=(0.5, 2.0 ** -6), steps=(8, 16))
    monkeypatch.setenv(ex.WORKERS_ENV, "1")
    a = ex.convergence_sweep(cfg)
    monkeypatch.setenv(ex.WORKERS_ENV, "2")
    b = ex.convergence_sweep(cfg)
    assert [r.row()[:8] for r in a] == [r.row()[:8] for r in b]
    assert [(r.scheme, r.eps, r.M) for r in a][:2] == [("mrc", 0.5, 8), ("mrc", 0.5, 16)]


def test_fit_slope():
    M = np.array([16, 32, 64, 128])
    assert ex.fit_slope(M, 1.0 / M ** 2) == pytest.approx(2.0)
    assert math.isnan(ex.fit_slope(M, np.ones(4)))


def test_stroboscopic_time():
    eps = 2.0 ** -5
    ts = ex.stroboscopic_time(math.pi, eps)
    assert ts <= math.pi and math.pi - ts < 2 * math.pi * eps
    assert (ts / (2 * math.pi * eps)) == pytest.approx(round(ts / (2 * math.pi * eps)))


def test_energy_history_rows():
    cfg = ex.ExperimentConfig(scheme="mm", eps=(2.0 ** -6,), steps=(16,), tfinal=1.0, record_every=4)
    rows = ex.energy_history(cfg)
    assert [r[4] for r in rows] == [0, 4, 8, 12, 16]
    assert rows[0][6] == 0.0 and len(rows[0]) == len(ex.CSV_COLUMNS["energy"])


def test_energy_needs_potential():
    from uapic.fields import custom_field
    fs = custom_field("c", lambda t, X: np.zeros_like(X),
                      lambda X: np.tile([0.0, 0.0, 1.0], (len(X), 1)),
                      lambda X: np.zeros((len(X), 3, 3)),
                      constant_intensity=True, divergence_free=True)
    with pytest.raises(ConfigurationError):
        ex.energy(fs, np.zeros(3), np.ones(3))


def test_cli_sweep_writes_csv(tmp_path, capsys):
    out = tmp_path / "s.csv"
    rc = main(["sweep", "--scheme", "tsf", "--eps", "2^-3", "--steps", "8,16", "--out", str(out)])
    assert rc == 0
    rows = list(csv.reader(out.open()))
    assert tuple(rows[0]) == ex.CSV_COLUMNS["sweep"]
    assert len(rows) == 3 and rows[1][0] == "tsf"


def test_cli_config_precedence(tmp_path):
    cfg_path = tmp_path / "c.txt"
    out = tmp_path / "e.csv"
    cfg_path.write_text(f"scheme = mm\neps = 0.25\nsteps = 8\ntfinal = 1\nout = {out}\n")
    assert main(["energy", "--config", str(cfg_path), "--steps", "4"]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[1][0] == "mm" and rows[-1][3] == "4"


def test_cli_recover_and_limit(tmp_path):
    out = tmp_path / "r.csv"
    assert main(["recover", "--steps", "16", "--samples", "32", "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert len(rows) == 34 and float(rows[-1][0]) == pytest.approx(math.pi)
    assert max(float(r[7]) for r in rows[1:]) < 0.1
    out = tmp_path / "l.csv"
    assert main(["limit-compare", "--eps", "2^-4,2^-5", "--steps", "400", "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert 1.5 < float(rows[2][4]) < 3.0


def test_cli_reports_errors(capsys):
    assert main(["sweep", "--scheme", "tsf", "--field", "example2"]) == 2
    assert "unit-intensity" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["bogus"])


def test_cli_vp_small(tmp_path):
    out = tmp_path / "vp"
    rc = main(["vp", "--mesh", "16,16,4", "--particles-per-cell", "2", "--steps", "4",
               "--tfinal", "0.5", "--snapshot-times", "0,0.5", "--out", str(out)])
    assert rc == 0
    names = sorted(p.name for p in out.iterdir())
    assert "diagnostics.csv" in names and len(names) == 3
