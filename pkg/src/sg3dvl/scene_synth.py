"""Deterministic synthetic scenes with templated referring language and QA pairs.

Every label (referred object, relation, answer) holds by construction and is
re-verified by brute force before a sample is emitted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .geometry import Aabb

CATEGORIES = ["chair", "table", "cabinet", "sofa", "lamp", "bed", "desk", "shelf"]
# Characteristic per-axis extents (m); object geometry carries the category
# signal the model-side proposal features rely on.
CATEGORY_BASE_SIZES = {
    "chair": (0.45, 0.45, 0.9),
    "table": (1.2, 0.8, 0.75),
    "cabinet": (0.6, 0.45, 1.5),
    "sofa": (1.6, 0.8, 0.8),
    "lamp": (0.3, 0.3, 1.3),
    "bed": (1.9, 1.5, 0.55),
    "desk": (1.3, 0.7, 0.75),
    "shelf": (0.9, 0.35, 1.6),
}
COLORS = ["red", "green", "blue", "black", "white", "yellow"]
PREDICATES = ["left", "right", "front", "behind", "near"]
COUNT_WORDS = ["one", "two", "three", "four", "five", "six", "seven", "eight"]

SCHEMA_VERSION = "v1"


def vocabulary_words() -> list[str]:
    """Closed word list covering every sentence the generator can emit."""
    base = ["bos", "eos", "there", "is", "a", "the", "what", "color", "room", "has", "and"]
    return base + COLORS + CATEGORIES + PREDICATES + COUNT_WORDS


@dataclass(frozen=True)
class SceneObject:
    id: int
    category: str
    attribute: str
    box: Aabb


@dataclass(frozen=True)
class Relation:
    subject_id: int
    object_id: int
    predicate: str


@dataclass(frozen=True)
class Utterance:
    tokens: tuple[str, ...]
    # (token_index, category, role) with role in {"referential", "auxiliary"}
    name_spans: tuple[tuple[int, str, str], ...]
    referred_id: int
    auxiliary_id: int | None


@dataclass(frozen=True)
class QAPair:
    question: tuple[str, ...]
    answer: str
    relevant_id: int


@dataclass(frozen=True)
class SyntheticScene:
    objects: tuple[SceneObject, ...]
    relations: tuple[Relation, ...]
    utterances: tuple[Utterance, ...]
    scene_description: tuple[str, ...]
    qa_pairs: tuple[QAPair, ...]


@dataclass(frozen=True)
class GeneratorConfig:
    n_objects_min: int = 4
    n_objects_max: int = 8
    room_xy: float = 6.0          # room spans [-room_xy/2, room_xy/2] in x and y
    room_z: float = 2.5           # z in [0, room_z]
    size_min: float = 0.5
    size_max: float = 1.2
    utterances_per_scene: int = 3
    qa_per_scene: int = 2
    axis_margin: float = 0.3      # left/right/front/behind center margin
    near_dist: float = 1.5
    max_attempts: int = 40

    def __post_init__(self):
        if self.n_objects_min < 2:
            raise ValueError("need at least 2 objects per scene to express a relation")


def relation_holds(predicate: str, subject: Aabb, obj: Aabb,
                   margin: float = 0.3, near_dist: float = 1.5) -> bool:
    """Geometric definition of each spatial predicate on box centers."""
    sc, oc = np.asarray(subject.center), np.asarray(obj.center)
    dx, dy = sc[0] - oc[0], sc[1] - oc[1]
    if predicate == "left":
        return dx < -margin
    if predicate == "right":
        return dx > margin
    if predicate == "front":
        return dy < -margin
    if predicate == "behind":
        return dy > margin
    if predicate == "near":
        axis_met = abs(dx) > margin or abs(dy) > margin
        return (not axis_met) and float(np.linalg.norm(sc - oc)) < near_dist
    raise ValueError(f"unknown predicate {predicate!r}")


def compute_relations(objects: tuple[SceneObject, ...], config: GeneratorConfig) -> tuple[Relation, ...]:
    """All ordered pairs and predicates whose geometric definition holds."""
    rels = []
    for s in objects:
        for o in objects:
            if s.id == o.id:
                continue
            for pred in PREDICATES:
                if relation_holds(pred, s.box, o.box, config.axis_margin, config.near_dist):
                    rels.append(Relation(s.id, o.id, pred))
    return tuple(rels)


def satisfying_objects(scene_objects, relations, color: str | None, category: str,
                       predicate: str, aux_category: str) -> list[int]:
    """Brute-force satisfier set of 'a <color> <category> <predicate> the <aux_category>'.

    color=None ignores the attribute (color-blind satisfaction).
    """
    rel_set = {(r.subject_id, r.object_id, r.predicate) for r in relations}
    by_id = {o.id: o for o in scene_objects}
    out = []
    for cand in scene_objects:
        if cand.category != category or (color is not None and cand.attribute != color):
            continue
        anchored = any(
            (cand.id, o.id, predicate) in rel_set and by_id[o.id].category == aux_category
            for o in scene_objects if o.id != cand.id
        )
        if anchored:
            out.append(cand.id)
    return out


def generate_utterance(scene_objects, relations, target_id: int,
                       rng: np.random.Generator) -> Utterance | None:
    """Templated referring utterance for target_id, or None if nothing disambiguates it.

    Template: "there is a <color> <category> <predicate> the <aux-category>".
    """
    by_id = {o.id: o for o in scene_objects}
    target = by_id[target_id]
    candidates = [r for r in relations if r.subject_id == target_id]
    if not candidates:
        return None
    order = rng.permutation(len(candidates))
    for idx in order:
        rel = candidates[idx]
        aux = by_id[rel.object_id]
        # uniqueness is required color-blind so the geometric content alone
        # identifies the target; the color word is decorative but correct
        sats = satisfying_objects(scene_objects, relations, None,
                                  target.category, rel.predicate, aux.category)
        if sats == [target_id]:
            tokens = ("there", "is", "a", target.attribute, target.category,
                      rel.predicate, "the", aux.category)
            spans = ((4, target.category, "referential"), (7, aux.category, "auxiliary"))
            return Utterance(tokens, spans, target_id, aux.id)
    return None


def _qa_satisfiers(scene_objects, relations, category, predicate, aux_category):
    rel_set = {(r.subject_id, r.object_id, r.predicate) for r in relations}
    by_id = {o.id: o for o in scene_objects}
    out = []
    for cand in scene_objects:
        if category is not None and cand.category != category:
            continue
        anchored = any(
            (cand.id, o.id, predicate) in rel_set and by_id[o.id].category == aux_category
            for o in scene_objects if o.id != cand.id
        )
        if anchored:
            out.append(cand.id)
    return out


def generate_qa_pair(scene_objects, relations, rng: np.random.Generator) -> QAPair | None:
    """One templated question with a unique by-construction answer, or None."""
    if not relations:
        return None
    by_id = {o.id: o for o in scene_objects}
    rel = relations[rng.integers(len(relations))]
    subj, aux = by_id[rel.subject_id], by_id[rel.object_id]
    if rng.random() < 0.5:
        # "what color is the <category> <predicate> the <aux-category>"
        sats = _qa_satisfiers(scene_objects, relations, subj.category, rel.predicate, aux.category)
        if len(sats) != 1:
            return None
        question = ("what", "color", "is", "the", subj.category, rel.predicate,
                    "the", aux.category)
        return QAPair(question, subj.attribute, sats[0])
    # "what is <predicate> the <aux-category>"
    sats = _qa_satisfiers(scene_objects, relations, None, rel.predicate, aux.category)
    if len(sats) != 1:
        return None
    question = ("what", "is", rel.predicate, "the", aux.category)
    return QAPair(question, subj.category, sats[0])


def scene_description(objects) -> tuple[str, ...]:
    """Inventory sentence enumerating every category present with its count."""
    counts: dict[str, int] = {}
    for o in objects:
        counts[o.category] = counts.get(o.category, 0) + 1
    parts: list[str] = ["the", "room", "has"]
    items = [c for c in CATEGORIES if c in counts]
    for i, cat in enumerate(items):
        if i > 0:
            parts.append("and")
        parts.extend([COUNT_WORDS[min(counts[cat], len(COUNT_WORDS)) - 1], cat])
    return tuple(parts)


def generate_scene(seed: int, config: GeneratorConfig) -> SyntheticScene:
    """Deterministic scene for a (seed, config) pair."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(config.n_objects_min, config.n_objects_max + 1))
    half = config.room_xy / 2
    objects = []
    for oid in range(n):
        category = CATEGORIES[rng.integers(len(CATEGORIES))]
        size = np.asarray(CATEGORY_BASE_SIZES[category]) * rng.uniform(0.85, 1.15, 3)
        size[2] = min(size[2], config.room_z - 0.01)
        cx = rng.uniform(-half + size[0] / 2, half - size[0] / 2)
        cy = rng.uniform(-half + size[1] / 2, half - size[1] / 2)
        cz = rng.uniform(size[2] / 2, config.room_z - size[2] / 2)
        objects.append(SceneObject(
            id=oid,
            category=category,
            attribute=COLORS[rng.integers(len(COLORS))],
            box=Aabb(tuple(float(v) for v in (cx, cy, cz)),
                     tuple(float(v) for v in size)),
        ))
    objects = tuple(objects)
    relations = compute_relations(objects, config)

    utterances: list[Utterance] = []
    for _ in range(config.utterances_per_scene):
        for _ in range(config.max_attempts):
            target = objects[rng.integers(len(objects))]
            utt = generate_utterance(objects, relations, target.id, rng)
            if utt is not None:
                utterances.append(utt)
                break

    qa_pairs: list[QAPair] = []
    for _ in range(config.qa_per_scene):
        for _ in range(config.max_attempts):
            qa = generate_qa_pair(objects, relations, rng)
            if qa is not None:
                qa_pairs.append(qa)
                break

    return SyntheticScene(objects, relations, tuple(utterances),
                          scene_description(objects), tuple(qa_pairs))


def generate_dataset(seed: int, n_scenes: int, config: GeneratorConfig) -> list[SyntheticScene]:
    """Scenes from disjoint per-scene seeds derived from the run seed."""
    return [generate_scene(seed * 1_000_003 + i, config) for i in range(n_scenes)]


# serialization -------------------------------------------------------------

class DatasetParseError(ValueError):
    def __init__(self, line_number: int, field_name: str, detail: str = ""):
        self.line_number = line_number
        self.field_name = field_name
        msg = f"line {line_number}: bad or missing field {field_name!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def _scene_to_record(scene: SyntheticScene) -> dict:
    rec = asdict(scene)
    rec["schema"] = SCHEMA_VERSION
    return rec


def _box_from_record(d: dict, line: int) -> Aabb:
    try:
        return Aabb(tuple(d["center"]), tuple(d["size"]))
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetParseError(line, "box", str(e)) from e


def _scene_from_record(rec: dict, line: int) -> SyntheticScene:
    if rec.get("schema") != SCHEMA_VERSION:
        raise DatasetParseError(line, "schema", f"expected {SCHEMA_VERSION!r}")
    try:
        objects = tuple(
            SceneObject(o["id"], o["category"], o["attribute"], _box_from_record(o["box"], line))
            for o in rec["objects"]
        )
        relations = tuple(Relation(r["subject_id"], r["object_id"], r["predicate"])
                          for r in rec["relations"])
        utterances = tuple(
            Utterance(tuple(u["tokens"]),
                      tuple(tuple(s) for s in u["name_spans"]),
                      u["referred_id"], u["auxiliary_id"])
            for u in rec["utterances"]
        )
        qa_pairs = tuple(QAPair(tuple(q["question"]), q["answer"], q["relevant_id"])
                         for q in rec["qa_pairs"])
        description = tuple(rec["scene_description"])
    except DatasetParseError:
        raise
    except (KeyError, TypeError) as e:
        raise DatasetParseError(line, str(e)) from e
    return SyntheticScene(objects, relations, utterances, description, qa_pairs)


def write_dataset(scenes, path) -> None:
    path = Path(path)
    with path.open("w") as f:
        for scene in scenes:
            f.write(json.dumps(_scene_to_record(scene)) + "\n")


def read_dataset(path) -> list[SyntheticScene]:
    path = Path(path)
    scenes = []
    with path.open() as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetParseError(line_no, "record", str(e)) from e
            scenes.append(_scene_from_record(rec, line_no))
    return scenes
