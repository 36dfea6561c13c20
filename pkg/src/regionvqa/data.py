"""Deterministic synthetic VQA scenes: coloured shapes on a small
multi-channel grid, templated questions and fabricated annotator answers.

A dataset directory holds ``images.jsonl``, ``train.jsonl``, ``val.jsonl``,
``vocab.json`` and the generating ``spec.txt``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .language import UNK_ID
from .region_features import pairwise_iou

SHAPES = ("square", "circle", "triangle", "cross", "diamond", "ring")
COLORS = {
    "red": (1.0, 0.1, 0.1), "green": (0.1, 0.9, 0.2), "blue": (0.15, 0.25, 1.0), "yellow": (1.0, 0.95, 0.1),
    "magenta": (0.95, 0.1, 0.9), "cyan": (0.1, 0.95, 0.95), "white": (1.0, 1.0, 1.0), "orange": (1.0, 0.55, 0.05),
}
COLOR_NAMES = tuple(COLORS)
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[UNK]")
TEMPLATE_WORDS = ("is", "there", "a", "how", "many", "what", "color", "the")
PLURALS = {"square": "squares", "circle": "circles", "triangle": "triangles", "cross": "crosses",
           "diamond": "diamonds", "ring": "rings"}
SPLITS = ("train", "val")


@dataclass
class SyntheticSpec:
    image_size: int = 32
    num_object_categories: int = 3
    num_attribute_categories: int = 4
    min_objects: int = 1
    max_objects: int = 4
    questions_per_image: int = 3
    num_train_images: int = 32
    num_val_images: int = 16
    num_negatives: int = 12
    jitter_per_object: int = 3
    min_object_size: int = 6
    max_object_size: int = 11
    annotator_noise: float = 0.1
    background_noise: float = 0.05
    answer_vocab: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        self.answer_vocab = tuple(self.answer_vocab)
        counts = (self.image_size, self.num_object_categories, self.num_attribute_categories, self.min_objects,
                  self.max_objects, self.questions_per_image, self.num_train_images, self.num_val_images,
                  self.min_object_size)
        if min(counts) < 1:
            raise ConfigurationError("synthetic spec counts must all be >= 1")
        if self.num_object_categories > len(SHAPES):
            raise ConfigurationError(f"at most {len(SHAPES)} object categories are available")
        if self.num_attribute_categories > len(COLORS):
            raise ConfigurationError(f"at most {len(COLORS)} attribute categories are available")
        if self.min_objects > self.max_objects:
            raise ConfigurationError("min_objects exceeds max_objects")
        if not self.min_object_size <= self.max_object_size < self.image_size:
            raise ConfigurationError("object sizes must fit inside the image")
        if not 0.0 <= self.annotator_noise < 1.0:
            raise ConfigurationError("annotator_noise must lie in [0, 1)")
        if self.num_negatives < 0 or self.jitter_per_object < 0:
            raise ConfigurationError("proposal counts must be non-negative")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @property
    def shapes(self) -> tuple[str, ...]:
        return SHAPES[: self.num_object_categories]

    @property
    def colors(self) -> tuple[str, ...]:
        return COLOR_NAMES[: self.num_attribute_categories]


def token_vocab() -> list[str]:
    return list(SPECIAL_TOKENS) + list(TEMPLATE_WORDS) + list(SHAPES) + list(COLOR_NAMES)


def required_answers(spec: SyntheticSpec) -> list[str]:
    return ["yes", "no"] + [str(i) for i in range(spec.max_objects + 1)] + list(spec.colors)


def answer_vocab(spec: SyntheticSpec) -> list[str]:
    """The configured answer vocabulary, or the templates' own answer set."""
    need = required_answers(spec)
    if not spec.answer_vocab:
        return need
    missing = [a for a in need if a not in spec.answer_vocab]
    if missing:
        raise ConfigurationError(f"answer vocabulary too small for the templates; missing {missing}")
    return list(spec.answer_vocab)


@dataclass
class SceneObject:
    box: tuple[float, float, float, float]
    category: int
    attribute: int


@dataclass
class Scene:
    image_id: int
    image: np.ndarray
    objects: list[SceneObject]
    proposals: np.ndarray

    @property
    def gt_boxes(self) -> np.ndarray:
        return np.array([o.box for o in self.objects], dtype=np.float64).reshape(-1, 4)


@dataclass
class VqaExample:
    question_id: int
    image_id: int
    question: str
    tokens: list[int]
    qtype: str
    answer: str
    answers: list[str]
    scene: Scene | None = field(default=None, repr=False)


# --- rendering -----------------------------------------------------------------------------

def _shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2.0
    dy, dx = (yy - c) / c, (xx - c) / c
    if shape == "square":
        return np.ones((size, size), bool)
    if shape == "circle":
        return dx * dx + dy * dy <= 1.0
    if shape == "triangle":
        return (dy >= -1.0) & (np.abs(dx) <= (dy + 1.0) / 2.0)
    if shape == "cross":
        return (np.abs(dx) <= 0.3) | (np.abs(dy) <= 0.3)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= 1.0
    if shape == "ring":
        r = dx * dx + dy * dy
        return (r <= 1.0) & (r >= 0.35)
    raise ConfigurationError(f"unknown shape {shape!r}")


def _place_objects(spec: SyntheticSpec, rng: np.random.Generator) -> list[SceneObject]:
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    objs: list[SceneObject] = []
    attempts = 0
    while len(objs) < n and attempts < 200:
        attempts += 1
        size = int(rng.integers(spec.min_object_size, spec.max_object_size + 1))
        x = int(rng.integers(0, spec.image_size - size + 1))
        y = int(rng.integers(0, spec.image_size - size + 1))
        box = (float(x), float(y), float(x + size), float(y + size))
        if objs and pairwise_iou(np.array([box]), np.array([o.box for o in objs])).max() > 0.0:
            continue
        objs.append(SceneObject(box, int(rng.integers(spec.num_object_categories)),
                                int(rng.integers(spec.num_attribute_categories))))
    return objs


def _render(spec: SyntheticSpec, objs: Sequence[SceneObject], rng: np.random.Generator) -> np.ndarray:
    s = spec.image_size
    img = (rng.random((3, s, s)) * spec.background_noise).astype(np.float32)
    for o in objs:
        x1, y1, x2, y2 = (int(v) for v in o.box)
        mask = _shape_mask(SHAPES[o.category], x2 - x1)
        color = np.array(COLORS[COLOR_NAMES[o.attribute]], dtype=np.float32)[:, None]
        region = img[:, y1:y2, x1:x2]
        region[:, mask] = color
    return np.round(img, 4)


def _proposals(spec: SyntheticSpec, objs: Sequence[SceneObject], rng: np.random.Generator) -> np.ndarray:
    s = float(spec.image_size)
    props = []
    for o in objs:
        x1, y1, x2, y2 = o.box
        props.append((x1, y1, x2, y2))
        w, h = x2 - x1, y2 - y1
        for _ in range(spec.jitter_per_object):
            dx, dy = rng.uniform(-0.15, 0.15, 2) * (w, h)
            sw, sh = rng.uniform(0.85, 1.15, 2)
            cx, cy = (x1 + x2) / 2 + dx, (y1 + y2) / 2 + dy
            props.append((cx - w * sw / 2, cy - h * sh / 2, cx + w * sw / 2, cy + h * sh / 2))
    gt = np.array([o.box for o in objs], dtype=np.float64).reshape(-1, 4)
    made, attempts = 0, 0
    while made < spec.num_negatives and attempts < 50 * max(spec.num_negatives, 1):
        attempts += 1
        w, h = rng.uniform(3.0, s / 2, 2)
        x1, y1 = rng.uniform(0, s - w), rng.uniform(0, s - h)
        box = (x1, y1, x1 + w, y1 + h)
        if len(gt) and pairwise_iou(np.array([box]), gt).max() >= 0.3:
            continue
        props.append(box)
        made += 1
    arr = np.clip(np.array(props, dtype=np.float64).reshape(-1, 4), 0.0, s)
    arr = np.round(arr, 2)
    return arr[(arr[:, 2] > arr[:, 0]) & (arr[:, 3] > arr[:, 1])]


def make_scene(spec: SyntheticSpec, image_id: int, rng: np.random.Generator) -> Scene:
    objs = _place_objects(spec, rng)
    return Scene(image_id, _render(spec, objs, rng), objs, _proposals(spec, objs, rng))


# --- questions -------------------------------------------------------------------------------

def tokenize(text: str) -> list[int]:
    """Whitespace tokens to ids; plural shape names share the singular id."""
    index = {w: i for i, w in enumerate(token_vocab())}
    index.update({pl: index[sg] for sg, pl in PLURALS.items()})
    return [index.get(w, UNK_ID) for w in text.lower().replace("?", "").split()]


def _question(spec: SyntheticSpec, scene: Scene, rng: np.random.Generator) -> tuple[str, str, str]:
    shapes, colors = spec.shapes, spec.colors
    present = {(o.attribute, o.category) for o in scene.objects}
    counts = np.bincount([o.category for o in scene.objects], minlength=len(shapes))
    kind = ("yesno", "number", "other")[int(rng.integers(3))]
    unique = [c for c in range(len(shapes)) if counts[c] == 1]
    if kind == "other" and not unique:
        kind = "number"
    if kind == "yesno":
        if present and rng.random() < 0.5:
            a, c = sorted(present)[int(rng.integers(len(present)))]
        else:
            a, c = int(rng.integers(len(colors))), int(rng.integers(len(shapes)))
        answer = "yes" if (a, c) in present else "no"
        return f"is there a {colors[a]} {shapes[c]}", "yesno", answer
    if kind == "number":
        c = int(rng.integers(len(shapes)))
        return f"how many {PLURALS[shapes[c]]}", "number", str(int(counts[c]))
    c = unique[int(rng.integers(len(unique)))]
    obj = next(o for o in scene.objects if o.category == c)
    return f"what color is the {shapes[c]}", "other", colors[obj.attribute]


def _type_answers(spec: SyntheticSpec, qtype: str) -> list[str]:
    if qtype == "yesno":
        return ["yes", "no"]
    if qtype == "number":
        return [str(i) for i in range(spec.max_objects + 1)]
    return list(spec.colors)


def _annotators(spec: SyntheticSpec, qtype: str, answer: str, rng: np.random.Generator) -> list[str]:
    pool = _type_answers(spec, qtype)
    out = []
    for _ in range(10):
        out.append(pool[int(rng.integers(len(pool)))] if rng.random() < spec.annotator_noise else answer)
    # the ground truth stays the most common answer
    if out.count(answer) < 4:
        out[:4] = [answer] * 4
    return out


def generate(spec: SyntheticSpec) -> tuple[list[Scene], dict[str, list[VqaExample]]]:
    """Scenes plus per-split questions; a pure function of ``spec``."""
    answer_vocab(spec)
    rng = np.random.default_rng(spec.seed)
    scenes, splits = [], {s: [] for s in SPLITS}
    qid = 0
    total = spec.num_train_images + spec.num_val_images
    for image_id in range(total):
        scene = make_scene(spec, image_id, rng)
        scenes.append(scene)
        split = "train" if image_id < spec.num_train_images else "val"
        for _ in range(spec.questions_per_image):
            text, qtype, answer = _question(spec, scene, rng)
            splits[split].append(VqaExample(qid, image_id, text + "?", tokenize(text), qtype, answer,
                                            _annotators(spec, qtype, answer, rng), scene))
            qid += 1
    return scenes, splits


# --- files ---------------------------------------------------------------------------------------

def _dump(path: Path, records: Sequence[dict]) -> None:
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n")


def scene_record(scene: Scene) -> dict:
    c, h, w = scene.image.shape
    return {
        "image_id": scene.image_id, "channels": c, "height": h, "width": w,
        "pixels": [float(v) for v in scene.image.reshape(-1)],
        "objects": [{"box": list(o.box), "category": o.category, "attribute": o.attribute} for o in scene.objects],
        "proposals": [[float(v) for v in p] for p in scene.proposals],
    }


def scene_from_record(rec: dict) -> Scene:
    img = np.asarray(rec["pixels"], dtype=np.float32).reshape(rec["channels"], rec["height"], rec["width"])
    objs = [SceneObject(tuple(o["box"]), int(o["category"]), int(o["attribute"])) for o in rec["objects"]]
    return Scene(int(rec["image_id"]), img, objs, np.asarray(rec["proposals"], dtype=np.float64).reshape(-1, 4))


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir) -> Path:
    """Write the dataset files for ``spec`` into ``out_dir``."""
    from .io import format_kv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes, splits = generate(spec)
    _dump(out / "images.jsonl", [scene_record(s) for s in scenes])
    for name, examples in splits.items():
        _dump(out / f"{name}.jsonl", [
            {"question_id": e.question_id, "image_id": e.image_id, "question": e.question, "tokens": e.tokens,
             "qtype": e.qtype, "answer": e.answer, "answers": e.answers} for e in examples
        ])
    (out / "vocab.json").write_text(
        json.dumps({"tokens": token_vocab(), "answers": answer_vocab(spec)}, indent=1) + "\n", encoding="utf-8")
    (out / "spec.txt").write_text(format_kv(asdict(spec)), encoding="utf-8")
    return out


def _read_jsonl(path: Path) -> list[dict]:
    with path.open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_scenes(data_dir) -> dict[int, Scene]:
    return {r["image_id"]: scene_from_record(r) for r in _read_jsonl(Path(data_dir) / "images.jsonl")}


def load_split(data_dir, split: str, scenes: dict[int, Scene] | None = None) -> list[VqaExample]:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    data_dir = Path(data_dir)
    scenes = scenes if scenes is not None else load_scenes(data_dir)
    return [VqaExample(r["question_id"], r["image_id"], r["question"], list(r["tokens"]), r["qtype"], r["answer"],
                       list(r["answers"]), scenes[r["image_id"]]) for r in _read_jsonl(data_dir / f"{split}.jsonl")]


def load_answer_vocab(data_dir) -> list[str]:
    return json.loads((Path(data_dir) / "vocab.json").read_text(encoding="utf-8"))["answers"]
