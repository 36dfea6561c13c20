import re

import numpy as np
import pytest

from regionvqa.cli import EXIT_FAILED, EXIT_INVALID, EXIT_OK, run_command
from regionvqa.data import (COLOR_NAMES, PLURALS, SHAPES, SyntheticSpec, answer_vocab, generate, generate_synthetic_dataset, load_split,
                            required_answers, tokenize, token_vocab)
from regionvqa.errors import ConfigurationError
from regionvqa.io import read_kv, read_region_features, region_features_to_bytes

TOY = """\
detector.fpn_dim=4
detector.embed_dim=8
detector.max_regions=4
detector.num_object_classes=3
detector.num_attribute_classes=4
detector.backbone_channels=4,4,4
detector.pool_size=2
detector.canonical_box_size=8.0
detector.detector_epochs=0
vqa.hidden_size=8
vqa.num_layers=1
vqa.num_heads=2
vqa.ffn_size=8
vqa.max_positions=16
vqa.glimpses=1
vqa.joint_dim=8
vqa.max_epochs=2
vqa.batch_size=4
"""


def recount(example):
    """Answer implied by the question text and the scene's labelled boxes."""
    shapes, colors = list(SHAPES), list(COLOR_NAMES)
    words = example.question.rstrip("?").split()
    objs = example.scene.objects
    if example.qtype == "yesno":
        color, shape = words[3], words[4]
        hit = any(colors[o.attribute] == color and shapes[o.category] == shape for o in objs)
        return "yes" if hit else "no"
    if example.qtype == "number":
        singular = {v: k for k, v in PLURALS.items()}[words[2]]
        return str(sum(shapes[o.category] == singular for o in objs))
    shape = words[4]
    matches = [o for o in objs if shapes[o.category] == shape]
    assert len(matches) == 1
    return colors[matches[0].attribute]


class TestGenerator:
    def test_bitwise_determinism(self, tmp_path):
        spec = SyntheticSpec(num_train_images=3, num_val_images=2, seed=11)
        a = generate_synthetic_dataset(spec, tmp_path / "a")
        b = generate_synthetic_dataset(spec, tmp_path / "b")
        names = sorted(p.name for p in a.iterdir())
        assert names == sorted(p.name for p in b.iterdir())
        assert all((a / n).read_bytes() == (b / n).read_bytes() for n in names)

    def test_seed_changes_data(self, tmp_path):
        a = generate_synthetic_dataset(SyntheticSpec(num_train_images=2, num_val_images=1, seed=1), tmp_path / "a")
        b = generate_synthetic_dataset(SyntheticSpec(num_train_images=2, num_val_images=1, seed=2), tmp_path / "b")
        assert (a / "images.jsonl").read_bytes() != (b / "images.jsonl").read_bytes()

    def test_one_image_one_question(self, tmp_path):
        spec = SyntheticSpec(num_train_images=1, num_val_images=1, questions_per_image=1)
        out = generate_synthetic_dataset(spec, tmp_path)
        for split in ("train", "val"):
            assert len((out / f"{split}.jsonl").read_text().splitlines()) == 1

    @pytest.mark.parametrize("seed", range(5))
    def test_recount_oracle(self, seed):
        _, splits = generate(SyntheticSpec(num_train_images=20, num_val_images=10, seed=seed))
        examples = splits["train"] + splits["val"]
        assert {e.qtype for e in examples} == {"yesno", "number", "other"}
        assert all(recount(e) == e.answer for e in examples)

    def test_annotators_and_types(self):
        spec = SyntheticSpec(num_train_images=10, num_val_images=2)
        vocab = set(answer_vocab(spec))
        for e in generate(spec)[1]["train"]:
            assert len(e.answers) == 10 and set(e.answers) <= vocab
            assert e.answers.count(e.answer) >= 4
            assert e.qtype == {"is": "yesno", "how": "number", "what": "other"}[e.question.split()[0]]
            assert e.tokens == tokenize(e.question)

    def test_vocabulary_too_small(self):
        with pytest.raises(ConfigurationError):
            generate(SyntheticSpec(answer_vocab=("yes", "no")))

    def test_explicit_vocabulary_superset(self):
        spec = SyntheticSpec(answer_vocab=tuple(required_answers(SyntheticSpec())) + ("maybe",))
        assert answer_vocab(spec)[-1] == "maybe"

    @pytest.mark.parametrize("kw", [dict(num_train_images=0), dict(min_objects=5), dict(max_object_size=40),
                                    dict(num_object_categories=9)])
    def test_invalid_spec(self, kw):
        with pytest.raises(ConfigurationError):
            SyntheticSpec(**kw)

    def test_plural_tokens_share_ids(self):
        assert tokenize("how many circles") == tokenize("how many circle")
        assert tokenize("zebra")[0] == token_vocab().index("[UNK]")


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.txt").write_text("num_train_images=4\nnum_val_images=3\nquestions_per_image=2\nseed=3\n")
    (root / "toy.cfg").write_text(TOY)
    assert run_command(["gen-data", "--config", str(root / "spec.txt"), "--out", str(root / "data")]) == EXIT_OK
    args = ["train", "--data", str(root / "data"), "--config", str(root / "toy.cfg"), "--seed", "0"]
    assert run_command(args + ["--out", str(root / "a.rvqw")]) == EXIT_OK
    return root


class TestCli:
    def test_train_is_deterministic(self, workspace):
        args = ["train", "--data", str(workspace / "data"), "--config", str(workspace / "toy.cfg"), "--seed", "0"]
        assert run_command(args + ["--out", str(workspace / "b.rvqw")]) == EXIT_OK
        assert (workspace / "a.rvqw").read_bytes() == (workspace / "b.rvqw").read_bytes()

    def test_ensemble_of_one_equals_eval(self, workspace):
        common = ["--data", str(workspace / "data"), "--checkpoints", str(workspace / "a.rvqw")]
        assert run_command(["eval", *common, "--out", str(workspace / "eval.kv")]) == EXIT_OK
        assert run_command(["ensemble", *common, "--out", str(workspace / "ens.kv")]) == EXIT_OK
        assert (workspace / "eval.kv").read_bytes() == (workspace / "ens.kv").read_bytes()
        report = read_kv(workspace / "eval.kv")
        assert {"yes_no", "number", "other", "score"} <= set(report)

    def test_eval_without_checkpoint(self, workspace, capsys):
        assert run_command(["eval", "--data", str(workspace / "data")]) == EXIT_INVALID
        assert "--checkpoints" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert run_command(["eval", "--bogus", "1"]) == EXIT_INVALID
        assert "usage:" in capsys.readouterr().err

    def test_unknown_command(self):
        assert run_command(["frobnicate"]) == EXIT_INVALID

    def test_bad_config_key(self, workspace, tmp_path):
        (tmp_path / "bad.cfg").write_text("vqa.no_such_key=1\n")
        args = ["train", "--data", str(workspace / "data"), "--config", str(tmp_path / "bad.cfg"),
                "--out", str(tmp_path / "x.rvqw")]
        assert run_command(args) == EXIT_INVALID

    def test_missing_checkpoint_file(self, workspace, tmp_path):
        args = ["eval", "--data", str(workspace / "data"), "--checkpoints", str(tmp_path / "none.rvqw")]
        assert run_command(args) == EXIT_INVALID

    def test_corrupt_checkpoint(self, workspace, tmp_path):
        (tmp_path / "junk.rvqw").write_bytes(b"not a checkpoint")
        args = ["eval", "--data", str(workspace / "data"), "--checkpoints", str(tmp_path / "junk.rvqw")]
        assert run_command(args) == EXIT_INVALID

    def test_extract_round_trip(self, workspace, tmp_path):
        out = tmp_path / "feats"
        args = ["extract", "--data", str(workspace / "data"), "--checkpoints", str(workspace / "a.rvqw"),
                "--split", "val", "--out", str(out)]
        assert run_command(args) == EXIT_OK
        files = sorted(out.glob("*.rvqf"))
        assert [f.name for f in files] == ["000004.rvqf", "000005.rvqf", "000006.rvqf"]
        for f in files:
            regions = read_region_features(f)
            assert regions.features.shape == (4, 8)
            assert region_features_to_bytes(regions) == f.read_bytes()

    def test_gradcheck_command(self, tmp_path, capsys):
        assert run_command(["gradcheck", "--instances", "2", "--out", str(tmp_path / "g.txt")]) == EXIT_OK
        text = (tmp_path / "g.txt").read_text()
        worst = float(re.search(r"overall max_rel_err=([0-9.eE+-]+)", text).group(1))
        assert worst <= 1e-4 and text.rstrip().endswith("PASS")

    def test_failure_exit_code(self, workspace, monkeypatch):
        import regionvqa.cli as cli_mod

        def boom(args):
            raise RuntimeError("simulated")
        monkeypatch.setitem(cli_mod.COMMANDS, "eval", (boom, "x"))
        assert run_command(["eval"]) == EXIT_FAILED
