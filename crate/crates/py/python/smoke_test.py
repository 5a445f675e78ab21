"""Smoke test for the resgen extension module.

Build and install first:  pip install -e crates/py --no-build-isolation
"""

import json
import os
import tempfile

import resgen


def main():
    designs, labels = resgen.generate_dataset(12, n=10, seed=3)
    assert len(designs) == 12 and len(labels) == 12
    d = designs[0]
    assert d.validate() == []
    assert abs(d.max_flow() - labels[0]) < 1e-9
    assert resgen.Design.from_json(d.to_json()).to_json() == d.to_json()
    metrics = json.loads(d.metrics())
    assert metrics["f_max"] == labels[0]

    mean, stderr = d.edns(samples=50, grid=4)
    assert 0.0 <= mean <= labels[0] and stderr >= 0.0
    assert resgen.resilience_ratio([0, 1, 2], [2, 2, 2], [4, 4, 4]) == 0.5

    est, history = resgen.Estimator.train(designs, labels, epochs=3)
    assert len(history) == 3
    gen, losses = resgen.Generator.train(designs, labels, epochs=1, latent_dim=4, hidden=8)
    assert len(losses) == 1
    samples = gen.sample(2, seed=1, max_steps=200)
    assert all(s.validate() == [] for s in samples)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "est.ckpt")
        est.save(path)
        assert resgen.Estimator.load(path).estimate(d) == est.estimate(d)

        cfg = json.loads(resgen.desk_config(seed=1))
        cfg["dataset"]["size"] = 12
        cfg["dataset"]["synth"]["n"] = 8
        cfg.update(batch=3, top_c=1, max_iterations=1, min_iterations=1)
        cfg["estimator_train"]["epochs"] = 1
        cfg["generator_train"]["epochs"] = 1
        cfg["generator"].update(latent_dim=4, hidden=8)
        cfg["resilience"]["samples"] = 5
        summary = json.loads(resgen.optimize(json.dumps(cfg), os.path.join(tmp, "run")))
        assert summary["iterations"] == 1

    try:
        resgen.Design.from_json("{}")
    except ValueError:
        pass
    else:
        raise AssertionError("malformed design accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
