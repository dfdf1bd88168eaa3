"""Smoke test for the cpl_py extension module.

Build the module first:

    cargo build --release -p cpl-py --features extension-module

then run `python3 crates/py/python/smoke_test.py`. The script imports
`cpl_py` from the path in $CPL_PY_LIB, or from target/release.
"""

import importlib.util
import json
import math
import os
import pathlib
import sys
import tempfile


def load_module():
    root = pathlib.Path(__file__).resolve().parents[3]
    lib = os.environ.get("CPL_PY_LIB") or root / "target" / "release" / "libcpl_py.so"
    spec = importlib.util.spec_from_file_location("cpl_py", lib)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    cpl = load_module()

    p = cpl.Prompt(0, 3, 10)
    assert p.ops == ["+1", "+2", "+3", "*2", "*3"], p.ops
    assert p.check_answer([4, 0])  # 3*3 = 9, +1 = 10
    assert not p.check_answer([0])
    assert p.oracle_distance() == 2

    assert math.isclose(cpl.ucb_score(0.5, 2, 8, 1.0), 0.5 + math.sqrt(2 * math.log(4)))
    assert cpl.ucb_score(0.5, 0, 8) == math.inf
    n = cpl.minmax_normalize([1.6, 0.4, 2.8])
    assert n[1] == 0.0 and n[2] == 1.0 and abs(n[0] - 0.5) < 1e-15

    config = cpl.Config().scaled(40, 40, 32)
    config.seed = 3
    try:
        config.tau = -1.0
        raise AssertionError("negative tau accepted")
    except ValueError:
        pass
    try:
        cpl.Config("[mcts]\nbogus = 1\n")
        raise AssertionError("unknown key accepted")
    except ValueError as e:
        assert "bogus" in str(e)

    tree = cpl.search(p, config)
    assert tree.root_visits == 33 and len(tree) > 1
    nodes = tree.nodes()
    assert nodes[0]["parent"] is None
    for pair in tree.pairs(0.3):
        assert pair["gap"] > 0.3

    exp = cpl.Experiment(config)
    assert exp.base_accuracy < exp.sft_accuracy
    result, policy = exp.run("cpl")
    assert len(result["epoch_accuracies"]) == 2
    assert result["artifacts"] == exp.digests
    assert abs(policy.accuracy(exp.eval_prompts) - result["epoch_accuracies"][-1]) < 1e-12
    sft_only, _ = exp.run("sft_only")
    assert sft_only["best_checkpoint_accuracy"] == exp.sft_accuracy
    labels = [label for label, _ in exp.sweep()]
    assert labels[0] == "rg_only" and labels[-1] == "pg_only"

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "policy.json")
        policy.save(path)
        assert cpl.Policy.load(path).checksum == policy.checksum
        cfg_path = os.path.join(tmp, "small.toml")
        with open(cfg_path, "w") as f:
            f.write(config.to_toml())
        out = os.path.join(tmp, "run")
        cpl.main(["run", "--config", cfg_path, "--out", out])
        with open(os.path.join(out, "result.json")) as f:
            on_disk = json.load(f)
        assert on_disk["epoch_accuracies"] == result["epoch_accuracies"]
        try:
            cpl.main(["extract", "--out", os.path.join(tmp, "empty")])
            raise AssertionError("missing input accepted")
        except FileNotFoundError:
            pass

    print(
        f"ok: base {result['base_accuracy']:.3f} -> sft {result['sft_accuracy']:.3f} "
        f"-> cpl {result['epoch_accuracies']}"
    )


if __name__ == "__main__":
    sys.exit(main())
