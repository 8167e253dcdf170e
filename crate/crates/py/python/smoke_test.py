"""Smoke test for the extension module: math helpers plus a tiny mock run."""

import math
import tempfile

import dpe


def test_math():
    cats = dpe.categories()
    assert len(cats) == 12 and cats[0] == "geometry-images"

    counts = dpe.allocate_counts({"artworks": 0.5, "others": 0.5}, 7)
    assert sum(counts.values()) == 7
    assert abs(counts["artworks"] - counts["others"]) == 1

    mix = dpe.mixture_from_counts({"statistical-charts": (1, 10), "artworks": (9, 10)})
    assert abs(sum(mix.values()) - 1.0) < 1e-9
    assert mix["statistical-charts"] == max(mix.values())

    adv = dpe.group_advantages([1.0, 0.0, 0.0, 1.0])
    assert adv == [1.0, -1.0, -1.0, 1.0]

    tilted = dpe.tilted_optimal_policy([0.5, 0.5], [1.0, 0.0], 1.0)
    assert abs(tilted[0] - math.e / (math.e + 1)) < 1e-12

    assert abs(dpe.soft_value(0.5, 1.0) - math.log((1 + math.e) / 2)) < 1e-12
    assert dpe.kl_exact(0.0, 0.3) == 0.0
    assert dpe.kl_lower_bound(0.5, 1.0) == 0.125
    assert dpe.diversity([[1.0, 0.0], [0.0, 2.0]]) == 1.0
    assert dpe.bandit_convergence()[-1] > 0.9

    try:
        dpe.soft_value(1.5, 1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("p outside [0, 1] accepted")


def test_pipeline():
    with tempfile.TemporaryDirectory() as ws:
        cfg = dpe.RunConfig("[diagnosis]\nsample_size = 60\n[world]\npool_size = 240\n")
        cfg.workspace = ws
        cfg.mock = True
        cfg.iterations = 1
        cfg.budget = 24
        p = dpe.Pipeline(cfg)
        try:
            p.run_stage("generate", 0)
        except dpe.PipelineError as e:
            assert e.args[1] == 3
        else:
            raise AssertionError("generate without a report succeeded")
        summary = p.evolve()
        assert len(summary["rows"]) == 12
        assert sum(r["accepted"] for r in summary["rows"]) == 24
        assert 0.0 <= p.diversity(0)["diversity"] <= 2.0
        assert 1.0 <= p.quality(0)["qs"] <= 5.0

        cfg.iterations = 2
        report = dpe.simulate(cfg)
        assert set(report["guided"]["final_skills"]) == set(dpe.categories())
        assert report["weakest_gets_largest_alpha"] in (True, False)


if __name__ == "__main__":
    test_math()
    test_pipeline()
    print("ok")
