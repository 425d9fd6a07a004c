import csv
import io
import json

import numpy as np
import pytest

from rsdsolve import bench_harness as bh
from rsdsolve.bench_harness import (
    CSV_FIELDS, ProblemConfig, StageError, count_applications, load_sweep_file, main,
    run_experiment, sweep, verify_small,
)
from rsdsolve.fem_assembly import PdeKind
from rsdsolve.grid_tree import ConfigurationError

KINDS = ["poisson", "weak", "strong", "lame"]


def parse_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


# -- configuration ---------------------------------------------------------------

def test_config_defaults():
    c = ProblemConfig()
    assert (c.pde, c.N, c.P, c.gamma, c.tol, c.max_outer, c.seed) == (PdeKind.POISSON, 17, 8, 2, 1e-12, 2000, 0)
    assert c.restart is None and not c.literal_eq4_sign


@pytest.mark.parametrize("kw", [
    dict(P=3), dict(P=1), dict(N=2), dict(gamma=0), dict(tol=0.0), dict(max_outer=0),
    dict(mode="bogus"), dict(restart=0), dict(hx=-1.0), dict(pde="heat"), dict(N=17.0),
])
def test_config_rejects(kw):
    with pytest.raises((ConfigurationError, ValueError)):
        ProblemConfig(**kw)


def test_config_dict_roundtrip():
    c = ProblemConfig(pde="lame", N=5, P=4, gamma=3, restart=30)
    assert ProblemConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c
    with pytest.raises(ConfigurationError):
        ProblemConfig.from_dict({"P": 4, "colour": "red"})


@pytest.mark.parametrize("kind, P, N", [("poisson", 2, 3), ("lame", 4, 5), ("weak", 8, 17)])
def test_n_dofs_matches_grid(kind, P, N):
    c = ProblemConfig(pde=kind, P=P, N=N)
    assert c.n_dofs == bh._build_problem(c)[0].n_dofs


# -- single runs ------------------------------------------------------------------------

def test_run_is_deterministic():
    c = ProblemConfig(pde="strong", P=4, N=9, gamma=2)
    a, b = run_experiment(c), run_experiment(c)
    assert a.beta == b.beta
    assert a.residual_history == b.residual_history
    assert a.final_relative_residual == b.final_relative_residual


@pytest.mark.parametrize("kind", KINDS)
def test_run_converges_and_recovers_solution(kind):
    r = run_experiment(ProblemConfig(pde=kind, P=4, N=9, gamma=4))
    assert r.converged
    assert r.final_relative_residual <= 1e-12
    assert r.solution_error <= 1e-6
    assert r.residual_history[0] > 0 and len(r.residual_history) == r.beta + 1
    assert r.preconditioner_applications == r.beta


def test_larger_gamma_needs_fewer_iterations():
    betas = [run_experiment(ProblemConfig(P=8, N=9, gamma=g)).beta for g in (1, 2, 4, 8)]
    assert betas == sorted(betas, reverse=True)
    assert betas[0] > betas[-1]


def test_iterations_nearly_independent_of_P():
    betas = [run_experiment(ProblemConfig(P=P, N=9, gamma=4)).beta for P in (4, 16, 64)]
    assert max(betas) - min(betas) <= 3


def test_zero_solution_hook():
    r = run_experiment(ProblemConfig(P=2, N=5, zero_solution=True))
    assert r.beta == 0 and r.converged


def test_max_outer_reports_non_convergence():
    r = run_experiment(ProblemConfig(P=8, N=9, gamma=1, max_outer=2))
    assert not r.converged and r.termination == "max-iterations"
    assert r.beta == 2


def test_restart_option_reaches_tolerance():
    r = run_experiment(ProblemConfig(pde="weak", P=8, N=9, gamma=2, restart=5))
    assert r.converged


def test_report_json_and_csv_row():
    r = run_experiment(ProblemConfig(P=2, N=5))
    doc = json.loads(json.dumps(r.to_dict()))
    assert doc["beta"] == r.beta and doc["config"]["pde"] == "poisson"
    assert doc["counters"]["leaf_solve_count"] == r.counters.leaf_solve_count
    assert list(r.csv_row()) == CSV_FIELDS


def test_stage_error_names_stage(monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("disk on fire")
    monkeypatch.setattr(bh, "assemble", boom)
    with pytest.raises(StageError) as ei:
        run_experiment(ProblemConfig(P=2, N=3))
    assert ei.value.stage == "assemble"


# -- count and verify modes --------------------------------------------------------------

@pytest.mark.parametrize("P, gamma", [(2, 1), (4, 2), (8, 4)])
def test_count_mode_laws(P, gamma):
    doc = count_applications(ProblemConfig(P=P, N=9, gamma=gamma, mode="count"))
    assert doc["leaf_solve_law_holds"] and doc["per_leaf_bound_holds"] and doc["message_law_holds"]
    assert doc["counters"]["leaf_solve_count"] == P + (P - 1) * (2 * gamma + 2)


@pytest.mark.parametrize("kind", KINDS)
def test_verify_tiny(kind):
    v = verify_small(ProblemConfig(pde=kind, P=2, N=3, gamma=4, mode="verify"))
    assert v.passed and v.relative_difference <= 1e-9


def test_verify_p4_n5():
    v = verify_small(ProblemConfig(P=4, N=5, gamma=4, mode="verify"))
    assert v.passed
    assert v.to_dict()["threshold"] == bh.VERIFY_TOL


def test_verify_zero_solution():
    v = verify_small(ProblemConfig(P=2, N=5, zero_solution=True, mode="verify"))
    assert v.passed and v.relative_difference == 0.0


def test_verify_size_cap():
    big = ProblemConfig(P=128, N=33, mode="verify")
    assert big.n_dofs > bh.VERIFY_MAX_DOFS
    with pytest.raises(ConfigurationError, match="capped"):
        verify_small(big)


# -- sweeps ----------------------------------------------------------------------------

def test_sweep_matches_single_runs():
    configs = [ProblemConfig(P=8, N=9, gamma=g) for g in (1, 2, 4, 8)]
    res = sweep(configs)
    assert [r.beta for r in res.reports] == [run_experiment(c).beta for c in configs]
    rows = parse_csv(res.to_csv())
    assert list(rows[0]) == CSV_FIELDS
    assert [int(r["beta"]) for r in rows] == [r.beta for r in res.reports]
    assert res.all_converged


def test_sweep_duplicates_identical():
    c = ProblemConfig(pde="lame", P=4, N=5)
    res = sweep([c, c])
    assert res.reports[0].residual_history == res.reports[1].residual_history


def test_sweep_empty_rejected():
    with pytest.raises(ConfigurationError):
        sweep([])


def test_sweep_records_failures(monkeypatch):
    real = bh.assemble

    def flaky(grid, kind, *a, **k):
        if kind is PdeKind.STRONG_COUPLED:
            raise RuntimeError("injected")
        return real(grid, kind, *a, **k)
    monkeypatch.setattr(bh, "assemble", flaky)
    res = sweep([ProblemConfig(P=2, N=5), ProblemConfig(pde="strong", P=2, N=5)])
    assert res.reports[0] is not None and res.reports[1] is None
    rows = parse_csv(res.to_csv())
    assert rows[0]["status"] == "converged"
    assert rows[1]["status"].startswith("error:") and "injected" in rows[1]["status"]
    assert "error" in json.loads(res.to_json())["reports"][1]
    assert not res.all_converged


def test_sweep_parallel_matches_serial():
    configs = [ProblemConfig(P=4, N=5, gamma=g) for g in (1, 2)]
    serial = [r.beta for r in sweep(configs).reports]
    assert [r.beta for r in sweep(configs, workers=2).reports] == serial


def test_load_sweep_file(tmp_path):
    p = tmp_path / "s.jsonl"
    p.write_text('# comment\n{"pde": "weak", "P": 2, "N": 5}\n\n{"P": 4, "N": 5, "gamma": 3}\n')
    cfgs = load_sweep_file(p)
    assert [c.pde for c in cfgs] == [PdeKind.WEAK_COUPLED, PdeKind.POISSON]
    assert cfgs[1].gamma == 3
    p.write_text("{not json\n")
    with pytest.raises(ConfigurationError):
        load_sweep_file(p)


# -- CLI -------------------------------------------------------------------------------

def test_cli_solve(capsys):
    assert main(["--pde", "strong", "--p", "2", "--n", "5"]) == 0
    assert "beta=" in capsys.readouterr().out


def test_cli_bad_config_exit_1(capsys):
    assert main(["--p", "3"]) == 1
    assert "configuration error" in capsys.readouterr().err


def test_cli_bad_out_suffix(tmp_path):
    assert main(["--p", "2", "--n", "3", "--out", str(tmp_path / "x.txt")]) == 1


def test_cli_non_convergence_exit_2():
    assert main(["--p", "8", "--n", "9", "--gamma", "1", "--max-outer", "1"]) == 2


def test_cli_csv_and_json_out(tmp_path):
    out = tmp_path / "r.csv"
    assert main(["--p", "2", "--n", "5", "--out", str(out)]) == 0
    rows = parse_csv(out.read_text())
    assert len(rows) == 1 and list(rows[0]) == CSV_FIELDS
    jout = tmp_path / "r.json"
    assert main(["--p", "2", "--n", "5", "--out", str(jout)]) == 0
    assert json.loads(jout.read_text())["beta"] == int(rows[0]["beta"])


def test_cli_count_and_verify(capsys, tmp_path):
    assert main(["--mode", "count", "--p", "4", "--n", "5", "--gamma", "2"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["counters"]["leaf_solve_count"] == 4 + 3 * 6
    assert main(["--mode", "verify", "--p", "4", "--n", "5", "--gamma", "4"]) == 0
    assert "verify PASS" in capsys.readouterr().out


def test_cli_sweep(tmp_path, capsys):
    p = tmp_path / "s.jsonl"
    p.write_text('{"P": 2, "N": 5}\n{"pde": "lame", "P": 2, "N": 5}\n')
    out = tmp_path / "s.json"
    assert main(["--sweep", str(p), "--out", str(out)]) == 0
    assert len(json.loads(out.read_text())["reports"]) == 2
    assert len(parse_csv(capsys.readouterr().out)) == 2


def test_four_point_poisson_sweep():
    # reference counts 18, 9, 26, 13; reproduced to within two iterations
    configs = [ProblemConfig(N=N, P=8, gamma=g) for N in (17, 33) for g in (2, 4)]
    rows = parse_csv(sweep(configs).to_csv())
    assert len(rows) == 4
    betas = [int(r["beta"]) for r in rows]
    assert all(abs(b - ref) <= 2 for b, ref in zip(betas, (18, 9, 26, 13)))
