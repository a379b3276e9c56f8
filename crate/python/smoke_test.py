"""Smoke test for the Python bindings.

Build and install the extension first:

    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/biaswap-*.whl
    python python/smoke_test.py
"""

import json
import math
import pathlib
import tempfile

import jsonschema

import biaswap

ROOT = pathlib.Path(__file__).resolve().parents[1]


def check_scoring():
    score, correct, p = biaswap.bias_score([5.0, 0.0, 0.0], 0)
    assert correct
    assert abs(p - math.exp(5) / (math.exp(5) + 2)) < 1e-12
    assert abs(score - (1 - p)) < 1e-12

    threshold, labels = biaswap.assign_pseudo_labels([0.0, 0.1, 0.9])
    assert abs(threshold - 1 / 3) < 1e-12
    assert labels == [0, 0, 1]

    probs = biaswap.sampling_distribution([10.0, 0.0, 0.0, 0.0], 2, 2)
    assert abs(probs[0] - 0.4754) < 1e-4 and abs(sum(probs) - 1) < 1e-12

    for q in (0.3, 0.7, 1.0):
        assert biaswap.gce_gradient_check([1.5, -0.2, 0.7], 2, q) <= 1e-5

    try:
        biaswap.bias_score([1.0], 0)
    except ValueError:
        pass
    else:
        raise AssertionError("one logit should be rejected")


def check_config():
    cfg = biaswap.Config.load(ROOT / "configs" / "tiny.cfg")
    assert len(cfg.hash()) == 16
    assert biaswap.Config.parse(str(cfg)) == cfg
    c1 = cfg.with_ablation("c1")
    assert c1.get("augment.pairing_policy") == "random_pairs"
    assert c1.ablation_tag() == "w/o c1"
    assert cfg.with_seed(3).hash() != cfg.hash()
    try:
        cfg.set("no.such.key", "1")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")
    return cfg


def check_pipeline(cfg):
    schema = json.loads(biaswap.report_schema())
    with tempfile.TemporaryDirectory() as root:
        p = biaswap.Pipeline(cfg, root)
        try:
            p.run_stage("partition")
        except RuntimeError as e:
            assert "data required" in str(e), e
        else:
            raise AssertionError("partition ran before data")
        p.run_all()
        assert all(p.is_complete(s) for s in biaswap.stages())
        assert p.run_stage("evaluate") == "up_to_date"

        report = json.loads(p.metrics_json())
        jsonschema.validate(report, schema)
        on_disk = json.loads((p.stage_dir("report") / "report.json").read_text())
        jsonschema.validate(on_disk, schema)
        assert on_disk == report
        r = report["reports"][0]
        print(
            f"tiny run {r['config_hash']}: debiased {100 * r['debiased']['unbiased_accuracy']:.1f}% "
            f"vanilla {100 * r['vanilla']['unbiased_accuracy']:.1f}% "
            f"partition F1 {r['partition']['f1']:.3f}"
        )


def main():
    check_scoring()
    cfg = check_config()
    check_pipeline(cfg)
    print("smoke test passed")


if __name__ == "__main__":
    main()
