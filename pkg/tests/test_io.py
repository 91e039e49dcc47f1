import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from scipy import constants
from hypothesis import strategies as st

from polaronlab import cli
from polaronlab.errors import ConvergenceError, ValidationError
from polaronlab.io import RunManifest, emit_csv, manifest_path, parse_config, parse_config_text, read_csv
from polaronlab.params import K_B, derive_scales, isotope_mass, recoil_energy


# -- configuration ------------------------------------------------------------------------


def test_preset_line_gives_full_fig2(fig2):
    assert parse_config_text("preset = fig2\n") == fig2


def test_override_applies_after_file(tmp_path, fig2):
    path = tmp_path / "run.cfg"
    path.write_text("preset = fig2\nT_nK = 3\n")
    p = parse_config(path, ["T_nK=25"])
    assert p.T == pytest.approx(25e-9, rel=1e-15, abs=0)
    assert p.replace(T=0.0) == fig2


def test_unknown_key_names_key_and_line():
    with pytest.raises(ValidationError) as exc:
        parse_config_text("preset = fig2\ngee = 1\n")
    assert exc.value.field == "gee"
    assert exc.value.line == 2
    assert "gee" in str(exc.value) and "line 2" in str(exc.value)


@pytest.mark.parametrize("text,field,line", [
    ("preset = fig2\n# note\nJ = fast\n", "J", 3),
    ("preset = fig2\nkappa_over_ERlambda = 1e-2\nJ_over_ER = nan\n", "J_over_ER", 3),
    ("preset = fig2\nM = 20.5\n", "M", 2),
    ("preset = fig2\njust words\n", None, 2),
])
def test_malformed_values_report_line(text, field, line):
    with pytest.raises(ValidationError) as exc:
        parse_config_text(text)
    assert exc.value.line == line
    if field is not None:
        assert exc.value.field == field


def test_physical_validation_is_traced_to_its_line():
    with pytest.raises(ValidationError) as exc:
        parse_config_text("preset = fig2\n\nn0_per_m = -5\n")
    assert exc.value.field == "n0_per_m"
    assert exc.value.line == 3


def test_missing_config_file(tmp_path):
    with pytest.raises(ValidationError):
        parse_config(tmp_path / "absent.cfg")


def test_unit_keys_resolve_against_final_masses():
    text = (
        "U_over_Ep = 2\n"
        "m_a = Cs133\nm_b = Rb87\nlambda_nm = 790\n"
        "J_over_ER = 0.01\nU = 0\nmu = 0\n"
        "kappa_over_ERlambda = 0.1\ng_over_ERlambda = 0.05\nn0_per_m = 5e6\nsigma_over_a = 0.1\n"
    )
    p = parse_config_text(text)
    E_R = recoil_energy(isotope_mass("Cs133"), 790e-9)
    assert p.J == pytest.approx(0.01 * E_R, rel=1e-15, abs=0)
    assert p.kappa == pytest.approx(0.1 * E_R * 790e-9, rel=1e-15, abs=0)
    assert p.sigma == pytest.approx(0.1 * 395e-9, rel=1e-15, abs=0)
    assert p.U == pytest.approx(2 * derive_scales(p).E_p, rel=1e-12, abs=0)


def test_temperature_in_polaron_units(fig2):
    p = parse_config_text("preset = fig2\nT_over_Ep = 2.3\n")
    assert K_B * p.T / derive_scales(fig2).E_p == pytest.approx(2.3, rel=1e-12, abs=0)


def test_custom_isotope():
    # isotope masses are given in unified atomic mass units
    p = parse_config_text("preset = fig2\nisotope_X7 = 7.016\nm_a = X7\n")
    assert p.m_a == pytest.approx(7.016 * constants.atomic_mass, rel=1e-15, abs=0)


def test_missing_parameters_are_listed():
    with pytest.raises(ValidationError, match="missing required parameters"):
        parse_config_text("m_a = K41\n")


# -- CSV ---------------------------------------------------------------------------------


def test_empty_table_writes_header_and_metadata(tmp_path):
    path = tmp_path / "empty.csv"
    emit_csv(["a", "b"], [], path, meta={"manifest_sha256": "abc"}, units={"a": "J", "b": "1"})
    assert path.read_text() == "# manifest_sha256: abc\n# units: a=J; b=1\na,b\n"
    meta, header, data = read_csv(path)
    assert header == ["a", "b"] and data.shape == (0, 2) and meta["manifest_sha256"] == "abc"


def test_nan_is_refused(tmp_path):
    with pytest.raises(ValueError, match="NaN"):
        emit_csv(["x"], [[1.0], [math.nan]], tmp_path / "bad.csv")


def test_ragged_rows_are_refused(tmp_path):
    with pytest.raises(ValueError):
        emit_csv(["x", "y"], [[1.0, 2.0], [3.0]], tmp_path / "bad.csv")


def test_number_formatting(tmp_path):
    path = tmp_path / "f.csv"
    emit_csv(["i", "x", "flag"], [(3, 0.1, True), (np.int64(-2), np.float32(0.5), False)], path)
    assert path.read_text().splitlines()[1:] == ["3,0.10000000000000001,1", "-2,0.5,0"]


finite = st.floats(allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(finite, finite, finite), max_size=12))
def test_csv_round_trip_is_exact(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("csv") / "t.csv"
    emit_csv(["a", "b", "c"], rows, path)
    _, header, data = read_csv(path)
    assert header == ["a", "b", "c"]
    np.testing.assert_array_equal(data, np.array(rows, dtype=float).reshape(len(rows), 3))


# -- command line ------------------------------------------------------------------------------


def run(argv):
    return cli.main([str(a) for a in argv])


def test_couplings_run_writes_csv_and_manifest(tmp_path, fig2):
    out = tmp_path / "v.csv"
    assert run(["couplings", "--preset", "fig2", "--dmax", 3, "--out", out]) == 0
    meta, header, data = read_csv(out)
    assert header == ["d", "V_closed_J", "V_quad_J", "ratio"]
    assert data[:, 0].tolist() == [0, 1, 2, 3]
    m = json.loads(manifest_path(out).read_text())
    assert m["hash"] == meta["manifest_sha256"]
    assert m["params_si"]["kappa"] == fig2.kappa
    assert "units" in meta


def test_rerun_reproduces_bytes(tmp_path):
    out = tmp_path / "h.csv"
    argv = ["dressed-hopping", "--tmin", 0, "--tmax", 40, "--tsteps", 3, "--set", "kappa_over_ERlambda=0.02",
            "--out", out]
    assert run(argv) == 0
    first = out.read_bytes()
    again = tmp_path / "again.csv"
    assert run(["rerun", manifest_path(out), "--out", again]) == 0
    assert again.read_bytes() == first
    out.unlink()
    assert run(["rerun", manifest_path(out)]) == 0
    assert out.read_bytes() == first


def test_manifest_hash_ignores_output_path_and_wall_time(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        assert run(["deformation", "--npts", 5, "--out", out]) == 0
    ma, mb = RunManifest.read(manifest_path(a)), RunManifest.read(manifest_path(b))
    assert ma.hash == mb.hash
    assert a.read_bytes() == b.read_bytes()
    assert run(["deformation", "--npts", 6, "--out", b]) == 0
    assert RunManifest.read(manifest_path(b)).hash != ma.hash


def test_config_file_with_unknown_key_exits_1(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("preset = fig2\ngee = 1\n")
    assert run(["couplings", "--config", cfg, "--out", tmp_path / "x.csv"]) == 1
    err = capsys.readouterr().err
    assert "gee" in err and "line 2" in err
    assert not (tmp_path / "x.csv").exists()


def test_usage_error_exits_1(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["couplings", "--dmax", "three", "--out", str(tmp_path / "x.csv")])
    assert exc.value.code == 1


def test_convergence_failure_exits_2(tmp_path, monkeypatch, capsys):
    def failing(args, params):
        raise ConvergenceError("kernel has not decayed to its plateau", achieved=0.2)

    entry = cli.COMMANDS["transport"]
    monkeypatch.setitem(cli.COMMANDS, "transport", (failing,) + entry[1:])
    assert run(["transport", "--out", tmp_path / "m.csv"]) == 2
    assert "convergence" in capsys.readouterr().err


@pytest.mark.parametrize("command", sorted(cli.COMMANDS))
def test_help_lists_output_columns(command, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([command, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    assert "columns" in text
    assert "[" in text  # units in brackets


def test_validate_prints_scales(capsys):
    assert run(["validate", "--preset", "fig2"]) == 0
    text = capsys.readouterr().out
    assert "xi/a" in text and "E_p/k_B" in text


def test_spectrum_columns_and_momentum_labels(tmp_path, fig3b):
    out = tmp_path / "s.csv"
    assert run(["spectrum", "--preset", "fig3b", "--set", "M=9", "--neigs", 0, "--out", out]) == 0
    meta, header, data = read_csv(out)
    assert header == ["k_index", "energy_ER", "band_approx_ER", "energy_J"]
    assert len(data) == 165  # C(11, 3)
    assert set(data[:, 0].astype(int)) == set(range(-4, 5))


def test_thermal_rows_sum_to_one(tmp_path):
    out = tmp_path / "p.csv"
    assert run(["thermal", "--preset", "fig3b", "--set", "M=9", "--npts", 4, "--out", out]) == 0
    _, header, data = read_csv(out)
    np.testing.assert_allclose(data[:, 1:4].sum(axis=1), 1.0, atol=1e-12)
