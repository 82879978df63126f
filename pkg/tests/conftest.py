import json

import pytest

# filled by test_acceptance; printed once at the end of the session
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def tiny_spec_dict(**over):
    raw = {
        "schema": "kgmem.experiment/1",
        "setup": 1,
        "kind": "triplets",
        "sizes": [40],
        "layers": [1],
        "activations": ["softmax"],
        "d_model": [8],
        "graph": {"synth": {"n_nodes": 150, "n_properties": 4, "mean_out_degree": 2.0, "seed": 1}},
        "epochs": 4,
        "eval_every": 2,
        "batch_size": 16,
        "repeats": 1,
        "seed": 0,
        "output_dir": "out",
    }
    raw.update(over)
    return raw


@pytest.fixture
def write_spec(tmp_path):
    def _write(name="spec.json", **over):
        path = tmp_path / name
        path.write_text(json.dumps(tiny_spec_dict(**over)), encoding="utf-8")
        return path

    return _write


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
