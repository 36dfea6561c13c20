"""scikit-learn style estimators over the detector, the fusion model and
ensembles, so the pieces compose with ``get_params``/``set_params``,
``clone`` and pipelines."""

from __future__ import annotations

import json
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .ban import BanConfig, VqaNet
from .data import Scene, VqaExample
from .errors import ConfigurationError
from .language import EncoderConfig, GruConfig, encode_question
from .region_features import (DetectorConfig, DetectorSample, RegionDetector, RegionFeatureSet,
                              extract_image_representation, train_detector)
from .training import TrainConfig, VqaItem, predict_logits, soft_scores, softmax_rows, train
from .validation import check_consistent_length, check_image, check_region_matrix, check_soft_targets, check_token_ids


def _as_scene(x) -> Scene:
    if isinstance(x, Scene):
        return x
    if isinstance(x, VqaExample) and x.scene is not None:
        return x.scene
    if isinstance(x, (tuple, list)) and len(x) == 2:
        image, proposals = x
        return Scene(-1, check_image(image), [], np.asarray(proposals, dtype=np.float64).reshape(-1, 4))
    raise TypeError(f"expected a Scene or an (image, proposals) pair, got {type(x).__name__}")


class RegionFeatureExtractor(TransformerMixin, BaseEstimator):
    """Detector that turns a scene (image + candidate boxes) into a
    :class:`RegionFeatureSet` of at most ``max_regions`` embeddings.

    ``fit`` trains the detector for ``detector_epochs`` epochs (0 keeps the
    seeded initialization); ``transform`` never runs the attribute head.
    """

    def __init__(self, fpn_dim=256, embed_dim=2048, max_regions=100, iou_threshold=0.5, num_object_classes=1600,
                 num_attribute_classes=400, attribute_head=True, multiscale=False, scales=(0.5, 0.75, 1.0, 1.25),
                 in_channels=3, backbone_channels=(64, 128, 256), pool_size=7, sampling_ratio=2,
                 canonical_box_size=16.0, attribute_loss_weight=0.5, detector_epochs=0, learning_rate=1e-3,
                 random_state=0):
        self.fpn_dim = fpn_dim
        self.embed_dim = embed_dim
        self.max_regions = max_regions
        self.iou_threshold = iou_threshold
        self.num_object_classes = num_object_classes
        self.num_attribute_classes = num_attribute_classes
        self.attribute_head = attribute_head
        self.multiscale = multiscale
        self.scales = scales
        self.in_channels = in_channels
        self.backbone_channels = backbone_channels
        self.pool_size = pool_size
        self.sampling_ratio = sampling_ratio
        self.canonical_box_size = canonical_box_size
        self.attribute_loss_weight = attribute_loss_weight
        self.detector_epochs = detector_epochs
        self.learning_rate = learning_rate
        self.random_state = random_state

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(
            fpn_dim=self.fpn_dim, embed_dim=self.embed_dim, max_regions=self.max_regions,
            iou_threshold=self.iou_threshold, num_object_classes=self.num_object_classes,
            num_attribute_classes=self.num_attribute_classes, attribute_head=self.attribute_head,
            multiscale=self.multiscale, scales=tuple(self.scales), in_channels=self.in_channels,
            backbone_channels=tuple(self.backbone_channels), pool_size=self.pool_size,
            sampling_ratio=self.sampling_ratio, canonical_box_size=self.canonical_box_size,
            attribute_loss_weight=self.attribute_loss_weight, seed=int(self.random_state),
        )

    def fit(self, X, y=None):
        scenes = [_as_scene(x) for x in X]
        self.detector_ = RegionDetector(self.detector_config())
        self.loss_curve_ = []
        if self.detector_epochs:
            samples = [DetectorSample(check_image(s.image), s.proposals, s.gt_boxes,
                                      np.array([o.category for o in s.objects], dtype=np.int64),
                                      np.array([o.attribute for o in s.objects], dtype=np.int64))
                       for s in scenes if len(s.proposals)]
            self.loss_curve_ = train_detector(self.detector_, samples, self.detector_epochs, self.learning_rate,
                                              seed=int(self.random_state))
        self.detector_.eval()
        return self

    def transform(self, X) -> list[RegionFeatureSet]:
        check_is_fitted(self, "detector_")
        return [extract_image_representation(check_image(s.image), s.proposals, self.detector_)
                for s in map(_as_scene, X)]


class BanVQAClassifier(ClassifierMixin, BaseEstimator):
    """Question encoder (BERT-style or GRU) with multi-glimpse bilinear attention.

    ``X`` is a sequence of ``(region_features, token_ids)`` pairs; ``y`` is an
    ``n x A`` matrix of soft answer scores.
    """

    def __init__(self, answer_vocab=None, language="bert", hidden_size=768, num_layers=12, num_heads=12,
                 ffn_size=3072, vocab_size=30522, max_positions=512, dropout=0.1, include_cls=True, word_dim=300,
                 gru_hidden=1280, glimpses=8, joint_dim=1024, classifier_hidden=None, residual_init="zeros",
                 max_epochs=20, base_lr=1e-3, language_lr=5e-5, schedule="cosine", batch_size=32,
                 target_train_accuracy=None, random_state=0):
        self.answer_vocab = answer_vocab
        self.language = language
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.ffn_size = ffn_size
        self.vocab_size = vocab_size
        self.max_positions = max_positions
        self.dropout = dropout
        self.include_cls = include_cls
        self.word_dim = word_dim
        self.gru_hidden = gru_hidden
        self.glimpses = glimpses
        self.joint_dim = joint_dim
        self.classifier_hidden = classifier_hidden
        self.residual_init = residual_init
        self.max_epochs = max_epochs
        self.base_lr = base_lr
        self.language_lr = language_lr
        self.schedule = schedule
        self.batch_size = batch_size
        self.target_train_accuracy = target_train_accuracy
        self.random_state = random_state

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(num_layers=self.num_layers, hidden_size=self.hidden_size, num_heads=self.num_heads,
                             ffn_size=self.ffn_size, vocab_size=self.vocab_size, max_positions=self.max_positions,
                             dropout=self.dropout, include_cls=self.include_cls, seed=int(self.random_state))

    def gru_config(self) -> GruConfig:
        return GruConfig(vocab_size=self.vocab_size, embed_dim=self.word_dim, hidden_size=self.gru_hidden,
                         seed=int(self.random_state))

    def train_config(self) -> TrainConfig:
        return TrainConfig(max_epochs=self.max_epochs, base_lr=self.base_lr, language_lr=self.language_lr,
                           schedule=self.schedule, batch_size=self.batch_size, seed=int(self.random_state),
                           target_train_accuracy=self.target_train_accuracy)

    def build_network(self, visual_dim: int, num_answers: int) -> VqaNet:
        if self.language == "bert":
            enc_cfg, q_dim = self.encoder_config(), self.hidden_size
        elif self.language == "gru":
            enc_cfg, q_dim = self.gru_config(), self.gru_hidden
        else:
            raise ConfigurationError(f"language must be 'bert' or 'gru', got {self.language!r}")
        ban_cfg = BanConfig(glimpses=self.glimpses, joint_dim=self.joint_dim, visual_dim=visual_dim,
                            question_dim=q_dim, num_answers=num_answers, classifier_hidden=self.classifier_hidden,
                            residual_init=self.residual_init, seed=int(self.random_state))
        return VqaNet.build(self.language, enc_cfg, ban_cfg)

    def _items(self, X, targets=None, answers=None, qtypes=None) -> list[VqaItem]:
        enc_cfg = self.encoder_config()
        n_ans = len(self.classes_)
        items = []
        for i, (regions, tokens) in enumerate(X):
            v = check_region_matrix(regions, getattr(self, "visual_dim_", None))
            if v.shape[0] == 0:
                v = np.zeros((1, v.shape[1]), np.float32)
            seq = encode_question(check_token_ids(tokens, self.vocab_size), enc_cfg)
            t = np.zeros(n_ans) if targets is None else targets[i]
            items.append(VqaItem(v, seq, t, [] if answers is None else answers[i],
                                 "other" if qtypes is None else qtypes[i], i))
        return items

    def fit(self, X, y, answers=None, qtypes=None):
        X = list(X)
        y = check_soft_targets(y)
        check_consistent_length(X, y)
        if not X:
            raise ValueError("cannot fit on an empty dataset")
        vocab = self.answer_vocab if self.answer_vocab is not None else list(range(y.shape[1]))
        if len(vocab) != y.shape[1]:
            raise ValueError(f"answer_vocab has {len(vocab)} entries but targets have {y.shape[1]} columns")
        self.classes_ = np.asarray(vocab)
        self.visual_dim_ = check_region_matrix(X[0][0]).shape[1]
        self.network_ = self.build_network(self.visual_dim_, y.shape[1])
        result = train(self.network_, self._items(X, y, answers, qtypes), self.train_config())
        self.loss_curve_ = result.epoch_losses
        self.applied_lrs_ = result.applied_lrs
        self.n_epochs_ = result.epochs_run
        self.train_accuracy_ = result.train_accuracy
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        return predict_logits(self.network_, self._items(list(X)))

    def predict_proba(self, X) -> np.ndarray:
        return softmax_rows(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        p = self.predict_proba(X)
        return self.classes_[p.argmax(axis=1)]


def _answer_index(vocab: Sequence[str]) -> dict[str, int]:
    return {str(a): i for i, a in enumerate(vocab)}


class VqaPipeline(ClassifierMixin, BaseEstimator):
    """Region extraction followed by the fusion classifier, fit on
    :class:`~regionvqa.data.VqaExample` lists."""

    def __init__(self, extractor=None, classifier=None):
        self.extractor = extractor
        self.classifier = classifier

    def _features(self, examples: Sequence[VqaExample]) -> dict[int, np.ndarray]:
        scenes = {}
        for e in examples:
            scenes.setdefault(id(e.scene), e.scene)
        sets = self.extractor_.transform(list(scenes.values()))
        return {key: rs.features for key, rs in zip(scenes, sets)}

    def _inputs(self, examples, feats):
        return [(feats[id(e.scene)], e.tokens) for e in examples]

    def fit(self, X: Sequence[VqaExample], y=None):
        examples = list(X)
        if not examples:
            raise ValueError("cannot fit on an empty dataset")
        from sklearn.base import clone

        self.extractor_ = clone(self.extractor) if self.extractor is not None else RegionFeatureExtractor()
        self.classifier_ = clone(self.classifier) if self.classifier is not None else BanVQAClassifier()
        unique = list({id(e.scene): e.scene for e in examples}.values())
        self.extractor_.fit(unique)
        vocab = self.classifier_.answer_vocab
        if vocab is None:
            raise ConfigurationError("the classifier needs an answer_vocab to map annotator answers")
        index = _answer_index(vocab)
        answers = [[index.get(a, -1) for a in e.answers] for e in examples]
        y = np.stack([soft_scores([a for a in ans if a >= 0], len(vocab)) for ans in answers])
        feats = self._features(examples)
        self.classifier_.fit(self._inputs(examples, feats), y, answers=answers, qtypes=[e.qtype for e in examples])
        self.classes_ = self.classifier_.classes_
        self.answer_vocab_ = [str(a) for a in self.classes_]
        return self

    def predict_proba(self, X: Sequence[VqaExample]) -> np.ndarray:
        check_is_fitted(self, "classifier_")
        examples = list(X)
        return self.classifier_.predict_proba(self._inputs(examples, self._features(examples)))

    def predict(self, X) -> np.ndarray:
        p = self.predict_proba(X)
        return self.classes_[p.argmax(axis=1)]

    # --- persistence -------------------------------------------------------------------------
    def to_tensors(self) -> dict[str, np.ndarray]:
        from .io import text_to_tensor

        check_is_fitted(self, "classifier_")
        meta = {
            "extractor": _plain_params(self.extractor_),
            "classifier": _plain_params(self.classifier_),
            "visual_dim": int(self.classifier_.visual_dim_),
        }
        out = {"meta.config": text_to_tensor(json.dumps(meta, sort_keys=True))}
        out.update({f"detector.{k}": v for k, v in self.extractor_.detector_.state_dict().items()})
        out.update({f"vqa.{k}": v for k, v in self.classifier_.network_.state_dict().items()})
        return out

    def save(self, path) -> None:
        from .io import save_checkpoint

        save_checkpoint(path, self.to_tensors())

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "VqaPipeline":
        from .io import tensor_to_text

        if "meta.config" not in tensors:
            raise ConfigurationError("checkpoint has no meta.config entry")
        meta = json.loads(tensor_to_text(tensors["meta.config"]))
        ext = RegionFeatureExtractor(**meta["extractor"])
        clf = BanVQAClassifier(**meta["classifier"])
        pipe = cls(ext, clf)
        pipe.extractor_ = RegionFeatureExtractor(**meta["extractor"])
        pipe.extractor_.detector_ = RegionDetector(pipe.extractor_.detector_config())
        pipe.extractor_.detector_.load_state_dict(
            {k[len("detector."):]: v for k, v in tensors.items() if k.startswith("detector.")})
        pipe.extractor_.detector_.eval()
        pipe.classifier_ = BanVQAClassifier(**meta["classifier"])
        vocab = pipe.classifier_.answer_vocab
        pipe.classifier_.classes_ = np.asarray(vocab)
        pipe.classifier_.visual_dim_ = int(meta["visual_dim"])
        net = pipe.classifier_.build_network(pipe.classifier_.visual_dim_, len(vocab))
        net.load_state_dict({k[len("vqa."):]: v for k, v in tensors.items() if k.startswith("vqa.")})
        net.eval()
        pipe.classifier_.network_ = net
        pipe.classes_ = pipe.classifier_.classes_
        pipe.answer_vocab_ = [str(a) for a in vocab]
        return pipe

    @classmethod
    def load(cls, path) -> "VqaPipeline":
        from .io import load_checkpoint

        return cls.from_tensors(load_checkpoint(path))


def _plain_params(est: BaseEstimator) -> dict:
    out = {}
    for k, v in est.get_params(deep=False).items():
        if isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, np.ndarray):
            v = v.tolist()
        out[k] = v
    return out


class ProbabilityAveragingEnsemble(ClassifierMixin, BaseEstimator):
    """Mean of the members' ``predict_proba`` outputs.

    Members are used as given (already fitted) unless ``refit`` is set.
    """

    def __init__(self, estimators=(), refit=False):
        self.estimators = estimators
        self.refit = refit

    def fit(self, X, y=None):
        from sklearn.base import clone

        members = list(self.estimators)
        if not members:
            raise ValueError("ensemble needs at least one member")
        self.estimators_ = [clone(m).fit(X, y) if self.refit else m for m in members]
        self.classes_ = np.asarray(getattr(self.estimators_[0], "classes_", None))
        return self

    def predict_proba(self, X) -> np.ndarray:
        from .training import ensemble_predict

        members = getattr(self, "estimators_", None) or list(self.estimators)
        return ensemble_predict(members, X)

    def predict(self, X) -> np.ndarray:
        p = self.predict_proba(X)
        members = getattr(self, "estimators_", None) or list(self.estimators)
        return np.asarray(members[0].classes_)[p.argmax(axis=1)]
