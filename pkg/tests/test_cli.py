import json
import math
import subprocess
import sys

import pytest

from escdemod.cli import (
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_OK,
    EXIT_SINGULAR,
    bundled_names,
    config_digest,
    main,
    number,
)


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def manifest(path, tag):
    return json.loads((path / f"manifest-{tag}.json").read_text())


def test_bundled_configs_present():
    names = bundled_names()
    for required in ("fig5_hQ", "fig5_hR", "tab1_rotating_sensor", "remark2", "quadratic", "exp"):
        assert required in names


@pytest.mark.parametrize("text,value", [(2, 2.0), ("pi", math.pi), ("2pi", 2 * math.pi), ("4*pi/3", 4 * math.pi / 3), ("-pi", -math.pi), ("1e-3", 1e-3)])
def test_number_parsing(text, value):
    assert number(text) == pytest.approx(value)


def test_digest_is_key_order_independent():
    assert config_digest({"a": 1, "b": [1, 2]}) == config_digest({"b": [1, 2], "a": 1})


def test_synthesize_singular_arm(capsys, tmp_path):
    code, out, _ = run(capsys, "synthesize", "--config", "arm_full", "--out", str(tmp_path))
    assert code == EXIT_SINGULAR
    assert "singular, rank 4/5" in out
    assert "0.1250000000" in out
    assert manifest(tmp_path, "synthesize")["outputs"] == []


def test_synthesize_crossvariance(capsys, tmp_path):
    code, out, _ = run(capsys, "synthesize", "--config", "arm_crossvariance", "--out", str(tmp_path))
    assert code == EXIT_OK
    assert "R matrix" in out and f"{2 / (3 * math.pi):.10f}" in out
    assert (tmp_path / "h_table.csv").exists()
    m = manifest(tmp_path, "synthesize")
    assert m["outputs"] == ["h_table.csv"] and m["command"] == "synthesize"


def test_synthesize_variant_override(capsys, tmp_path):
    code, out, _ = run(capsys, "synthesize", "--config", "arm_gradient", "--variant", "paper-verbatim", "--out", str(tmp_path))
    assert code == EXIT_OK and "paper-verbatim" in out


def test_synthesize_sine(capsys, tmp_path):
    code, out, _ = run(capsys, "synthesize", "--config", "sine_m2", "--out", str(tmp_path))
    assert code == EXIT_OK and "estimable, rank 3/3" in out


def test_config_errors(capsys, tmp_path):
    code, _, err = run(capsys, "synthesize", "--config", "does-not-exist", "--out", str(tmp_path))
    assert code == EXIT_CONFIG and "bundled" in err
    bad = tmp_path / "bad.yaml"
    bad.write_text("dither: {kind: triangle-arm\n")
    code, _, err = run(capsys, "synthesize", "--config", str(bad), "--out", str(tmp_path))
    assert code == EXIT_CONFIG and "line" in err
    unknown = tmp_path / "unknown_map.yaml"
    unknown.write_text("map: nope\ntheta_hat: [0]\namplitudes: [0.1]\ndemod: {dither: {kind: sinusoidal, amplitudes: [1], rates: [1]}}\n")
    code, _, err = run(capsys, "estimate", "--config", str(unknown), "--out", str(tmp_path))
    assert code == EXIT_CONFIG and "available" in err


def test_estimate_remark2(capsys, tmp_path):
    code, out, _ = run(capsys, "estimate", "--config", "remark2", "--out", str(tmp_path))
    assert code == EXIT_OK
    slope = float(out.split("slope")[1])
    assert slope == pytest.approx(0.5, abs=0.02)
    assert (tmp_path / "sweep.csv").exists()


def test_estimate_quadratic_exact(capsys, tmp_path):
    code, out, _ = run(capsys, "estimate", "--config", "quadratic", "--out", str(tmp_path))
    assert code == EXIT_OK and "exact" in out


def test_estimate_exp(capsys, tmp_path):
    code, out, _ = run(capsys, "estimate", "--config", "exp", "--out", str(tmp_path))
    assert code == EXIT_OK and float(out.split("slope")[1]) >= 0.95


def test_simulate_zero_gain(capsys, tmp_path):
    code, out, _ = run(capsys, "simulate", "--config", "zero_gain", "--out", str(tmp_path))
    assert code == EXIT_OK and "reach time: none" in out
    assert manifest(tmp_path, "simulate-zero_gain")["outputs"] == ["zero_gain.csv"]


def test_simulate_divergence_exit_code(capsys, tmp_path):
    code, out, _ = run(capsys, "simulate", "--config", "tab1_rotating_sensor", "--out", str(tmp_path))
    assert code == EXIT_DIVERGED and "diverged" in out
    assert (tmp_path / "tab1_rotating_sensor.csv").exists()


def test_verify_eq37_and_rerun_identical(capsys, tmp_path):
    code, out, _ = run(capsys, "verify", "--suite", "eq37", "--out", str(tmp_path / "a"))
    assert code == EXIT_OK and "[PASS] eq37" in out
    run(capsys, "verify", "--suite", "eq37", "--out", str(tmp_path / "b"))
    for name in ("eq37.csv", "manifest-verify-eq37.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("suite", ["appendix", "remark2", "polynomial-exactness"])
def test_verify_suites_pass(capsys, tmp_path, suite):
    code, out, _ = run(capsys, "verify", "--suite", suite, "--out", str(tmp_path))
    assert code == EXIT_OK and f"[PASS] {suite}" in out


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "escdemod", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "escdemod" in proc.stdout
