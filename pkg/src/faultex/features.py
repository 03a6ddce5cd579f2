"""Model inputs: tokenization, the vocabulary, and masked feature extraction."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .worldmodel import Environment, RobotState, TaskSpec, distance

PAD, UNK, START, END = "<pad>", "<unk>", "<start>", "<end>"
SPECIALS = (PAD, UNK, START, END)
PAD_ID, UNK_ID, START_ID, END_ID = 0, 1, 2, 3

AOI_RADIUS = 1.5  # m around the focused place; objects inside form the area of interest
MAX_OBJECTS = 5

# Continuous feature block layout (21 entries + parallel validity mask):
#   [0]      distance robot -> goal place
#   [1]      distance robot -> target object
#   [2:5]    angular velocity
#   [5:8]    linear velocity
#   [8:15]   action statuses (undefined -> 0.5 raw with mask 0, zeroed by the mask)
#   [15:20]  distance target -> each area-of-interest object (slot-aligned with X)
#   [20]     target-in-area-of-interest flag
N_FEATURES = 21

_TOKEN_CLEANER = re.compile(r"[^a-z0-9_\s]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _TOKEN_CLEANER.sub("", text.lower()).split()


def detokenize(tokens: list[str]) -> str:
    return " ".join(tokens)


def entity_token(name: str) -> str:
    """Entity names become single vocabulary tokens; spaces collapse to underscores."""
    return name.replace(" ", "_")


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[: len(SPECIALS)] != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def encode_token(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def encode_text(self, text: str) -> list[int]:
        return [self.encode_token(t) for t in tokenize(text)]

    def decode(self, ids, skip_specials: bool = True) -> str:
        words = []
        for i in ids:
            token = self.tokens[int(i)]
            if skip_specials and token in SPECIALS:
                continue
            words.append(token)
        return detokenize(words)

    def content_hash(self) -> str:
        return hashlib.sha256(self.file_text().encode()).hexdigest()

    def file_text(self) -> str:
        return "\n".join(self.tokens) + "\n"


def build_vocab(corpus: list[str]) -> Vocabulary:
    """Vocabulary over a corpus of sentences and entity tokens, specials first.

    Word order follows first occurrence in the corpus, so the result is stable
    across runs for the same corpus.
    """
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    tokens = list(SPECIALS)
    seen = set(SPECIALS)
    for text in corpus:
        for token in tokenize(text):
            if token not in seen:
                seen.add(token)
                tokens.append(token)
    return Vocabulary(tuple(tokens))


def save_vocab(vocab: Vocabulary, path: "str | Path") -> None:
    Path(path).write_text(vocab.file_text())


def load_vocab(path: "str | Path") -> Vocabulary:
    lines = Path(path).read_text().splitlines()
    return Vocabulary(tuple(lines))


@dataclass(frozen=True)
class FeatureVector:
    """Encoder tokens X, target-object token o, and the masked continuous block N."""

    X: np.ndarray  # (5,) int token ids, PAD-padded
    o: int
    N: np.ndarray  # (21,) float64, zero where masked
    mask: np.ndarray  # (21,) float64 in {0, 1}

    def __post_init__(self):
        if self.X.shape != (MAX_OBJECTS,) or self.N.shape != (N_FEATURES,) or self.mask.shape != (N_FEATURES,):
            raise ValueError("feature vector has a fixed layout")


def focus_place(state: RobotState, task: TaskSpec):
    """The place the plan is currently working at: destination once the lift is done."""
    return task.destination if state.status_of("lift") == 1 else task.source


def area_of_interest(state: RobotState, env: Environment, task: TaskSpec) -> list:
    """Objects the robot knows about: populated only after segmentation, within range."""
    if state.status_of("segment") != 1:
        return []
    center = state.entity_locations[focus_place(state, task)]
    return [o for o in env.objects if distance(state.entity_locations[o], center) <= AOI_RADIUS]


def encoder_token(env: Environment, name: str) -> str:
    """Vocabulary token an entity contributes to the encoder input.

    Environments declaring a kitchen correspondence encode their entities as the
    corresponding kitchen token, which is what lets a model trained on kitchen
    episodes read scenes from the other environment.
    """
    if env.kitchen_correspondence:
        name = env.kitchen_correspondence.get(name, name)
    return entity_token(name)


def extract_features(state: RobotState, env: Environment, task: TaskSpec, vocab: Vocabulary) -> FeatureVector:
    """Derive the model feature vector from a robot state.

    Entries that are undefined at the current timestep carry mask 0 and value 0.
    """
    obj_g = area_of_interest(state, env, task)
    x = np.full(MAX_OBJECTS, PAD_ID, dtype=np.int64)
    for i, obj in enumerate(obj_g):
        x[i] = vocab.encode_token(encoder_token(env, obj.name))

    target = task.target_object
    target_pos = state.entity_locations[target]
    goal_pos = state.entity_locations[task.destination]
    o_present = target in obj_g

    raw = np.zeros(N_FEATURES)
    mask = np.zeros(N_FEATURES)
    raw[0], mask[0] = distance(state.position, goal_pos), 1.0
    if o_present:
        raw[1], mask[1] = distance(state.position, target_pos), 1.0
    raw[2:5], mask[2:5] = state.angular_velocity, 1.0
    raw[5:8], mask[5:8] = state.linear_velocity, 1.0
    for i, status in enumerate(state.action_status):
        if status is None:
            raw[8 + i], mask[8 + i] = 0.5, 0.0
        else:
            raw[8 + i], mask[8 + i] = float(status), 1.0
    for i, obj in enumerate(obj_g):
        raw[15 + i] = distance(target_pos, state.entity_locations[obj])
        mask[15 + i] = 1.0
    raw[20], mask[20] = (1.0 if o_present else 0.0), 1.0

    return FeatureVector(X=x, o=vocab.encode_token(encoder_token(env, target.name)), N=raw * mask, mask=mask)
