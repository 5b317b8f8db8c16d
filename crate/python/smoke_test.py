"""Smoke test for the rsvqa Python extension.

Install first:  pip install --no-build-isolation -e crates/python
"""
import math
import tempfile
from pathlib import Path

import rsvqa_py as rv


def main():
    with tempfile.TemporaryDirectory() as tmp:
        data = Path(tmp) / "train"
        vocab = rv.generate_dataset(str(data), 16, seed=3)
        assert len(vocab) > 5
        ids = vocab.encode("is there water?")
        assert vocab.decode(ids) == "is there water"

        model = rv.Model.init(vocab, seed=1)
        assert model.stage is None and model.num_parameters > 0
        losses = model.train(str(data), stage="pretrain", steps=30, batch_size=8, seed=1)
        assert len(losses) == 30 and all(math.isfinite(x) for x in losses)
        assert losses[-1] < losses[0], (losses[0], losses[-1])
        assert model.stage == "pretrain"

        ckpt = Path(tmp) / "ckpt"
        model.save(str(ckpt))
        again = rv.Model.load(str(ckpt))
        name = again.parameter_names()[0]
        assert again.parameter(name) == model.parameter(name)

        image = str(next((data / "images").iterdir()))
        answer, score = model.answer(image, "is there water?", beam=3, prompt="pretrain")
        greedy, _ = model.answer(image, "is there water?", beam=1, prompt="pretrain")
        assert score <= 0.0 and isinstance(answer, str) and isinstance(greedy, str)
        lp = model.sequence_log_prob(image, "is there water?", "yes", prompt="pretrain")
        assert lp <= 0.0
        idx, scores = model.score_choices(image, "which class covers most of the image?", ["water", "forest"])
        assert idx in (0, 1) and len(scores) == 2

        report = model.evaluate(str(data), beam=2, prompt="pretrain")
        assert set(report["counts"]) == {"yesno", "mc", "open"}

        assert rv.yesno_accuracy(["yes", "no", "yes", "no"], ["yes", "no", "no", "no"]) == 0.75
        assert rv.mc_accuracy([0, 0, 0], [0, 1, 2]) == 1 / 3
        assert abs(rv.open_f1(["water body"], ["water"]) - 2 / 3) < 1e-12
        try:
            rv.mc_accuracy([], [])
        except ValueError:
            pass
        else:
            raise AssertionError("empty metric should raise")

        csv = Path(tmp) / "human.csv"
        csv.write_text(
            "method,criterion,score,annotator,question_id\n"
            "ours,correctness,4,a,q1\nours,correctness,5,b,q1\nours,correctness,4,c,q2\n"
        )
        assert rv.aggregate_human_eval(str(csv))["ours"]["correctness"] == 4.3

        try:
            rv.Model.load(str(Path(tmp) / "missing"))
        except OSError:
            pass
        else:
            raise AssertionError("missing checkpoint should raise")
    print("python smoke test: OK")


if __name__ == "__main__":
    main()
