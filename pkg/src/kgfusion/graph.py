"""Knowledge-graph store: data model, JSONL ingestion, pair conversion,
synthetic generation, and deterministic batch sampling.

Entities carry any mix of text and image descriptions, so a sampled edge can
take any of the four forms (image,rel,image), (image,rel,text), (text,rel,text),
(text,rel,image). Graphs are immutable after construction and safe for shared
reads; samplers keep their own rng state.

On-disk format: one JSON record per line, kinds "entity" / "relation" /
"triplet"; image pixels live in sidecar blob files (little-endian u32 height,
width, channels header followed by row-major float32 pixels).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tokenizer import ADJECTIVES, NOUNS

RESERVED_RELATION_NAMES = ("image of", "caption of")

RELATION_NAMES = (
    "is a", "part of", "near", "made of", "kind of", "inside", "above",
    "below", "linked to", "next to", "holds", "faces", "beside", "under",
    "over", "around",
)

TEXT = "text"
IMAGE = "image"


class GraphError(ValueError):
    """Malformed graph data, bad references, or infeasible sampling."""


@dataclass(eq=False)
class Entity:
    """Graph node with one or more descriptions in either modality."""

    id: str
    texts: tuple[str, ...] = ()
    images: tuple[np.ndarray, ...] = ()

    def descriptions(self) -> list[tuple[str, object]]:
        """All descriptions as (modality, content), texts first."""
        out: list[tuple[str, object]] = [(TEXT, t) for t in self.texts]
        out.extend((IMAGE, im) for im in self.images)
        return out

    def validate(self) -> None:
        if not self.id:
            raise GraphError("entity id must be a non-empty string")
        if not self.texts and not self.images:
            raise GraphError(f"entity {self.id!r} has no descriptions")
        for t in self.texts:
            if not t.strip():
                raise GraphError(f"entity {self.id!r} has an empty text description")
        for im in self.images:
            if im.ndim != 3:
                raise GraphError(f"entity {self.id!r}: image must be (h, w, c), got shape {im.shape}")
            if im.size and (float(im.min()) < 0.0 or float(im.max()) > 1.0):
                raise GraphError(f"entity {self.id!r}: image pixels must lie in [0, 1]")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Entity):
            return NotImplemented
        return (
            self.id == other.id
            and self.texts == other.texts
            and len(self.images) == len(other.images)
            and all(np.array_equal(a, b) for a, b in zip(self.images, other.images))
        )

    def __repr__(self) -> str:
        return f"Entity({self.id!r}, texts={len(self.texts)}, images={len(self.images)})"


@dataclass(frozen=True)
class Relation:
    id: int
    name: str


@dataclass(frozen=True)
class Triplet:
    """Directed edge. Modality tags are unset until the edge is sampled."""

    head: str
    relation: int
    tail: str
    head_modality: str | None = None
    tail_modality: str | None = None


class KnowledgeGraph:
    """Immutable triplet store with an incoming-edge index (tail id -> triplet rows)."""

    def __init__(self, entities: list[Entity], relations: list[Relation], triplets: list[Triplet]):
        self.entities: dict[str, Entity] = {}
        for ent in entities:
            ent.validate()
            if ent.id in self.entities:
                raise GraphError(f"duplicate entity id {ent.id!r}")
            self.entities[ent.id] = ent
        self.relations: dict[int, Relation] = {}
        names = set()
        for rel in relations:
            if rel.id in self.relations:
                raise GraphError(f"duplicate relation id {rel.id}")
            if rel.name in names:
                raise GraphError(f"duplicate relation name {rel.name!r}")
            names.add(rel.name)
            self.relations[rel.id] = rel
        if sorted(self.relations) != list(range(len(self.relations))):
            raise GraphError("relation ids must be dense from 0")
        self.triplets: list[Triplet] = list(triplets)
        self.incoming: dict[str, list[int]] = {}
        for i, trip in enumerate(self.triplets):
            for end in (trip.head, trip.tail):
                if end not in self.entities:
                    raise GraphError(f"triplet {i} references unknown entity {end!r}")
            if trip.relation not in self.relations:
                raise GraphError(f"triplet {i} references unknown relation {trip.relation}")
            self.incoming.setdefault(trip.tail, []).append(i)

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    @property
    def n_triplets(self) -> int:
        return len(self.triplets)

    def relation_names(self) -> list[str]:
        return [self.relations[i].name for i in range(len(self.relations))]

    def __eq__(self, other) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (
            self.entities == other.entities
            and self.relations == other.relations
            and self.triplets == other.triplets
        )

    def __repr__(self) -> str:
        return f"KnowledgeGraph(entities={self.n_entities}, relations={self.n_relations}, triplets={self.n_triplets})"


# ---------------------------------------------------------------------------
# image blobs


def write_image_blob(path: str | Path, pixels: np.ndarray) -> None:
    if pixels.ndim != 3:
        raise GraphError(f"image blob must be (h, w, c), got shape {pixels.shape}")
    arr = np.ascontiguousarray(pixels, dtype="<f4")
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<III", h, w, c))
        f.write(arr.tobytes())


def read_image_blob(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise GraphError(f"image blob {path}: truncated header")
    h, w, c = struct.unpack_from("<III", data)
    expected = 12 + 4 * h * w * c
    if len(data) != expected:
        raise GraphError(f"image blob {path}: expected {expected} bytes for {h}x{w}x{c}, got {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, c).astype(np.float32)


# ---------------------------------------------------------------------------
# serialization


def _blob_dir(path: Path) -> Path:
    return path.parent / (path.stem + ".blobs")


def save_graph(graph: KnowledgeGraph, path: str | Path) -> None:
    """Write JSONL records plus a sidecar blob directory for images.

    Output bytes are deterministic for a given graph (no timestamps, fixed
    record and key order), so equal graphs serialize identically.
    """
    path = Path(path)
    blob_dir = _blob_dir(path)
    lines = []
    for ordinal, ent in enumerate(graph.entities.values()):
        refs = []
        for k, im in enumerate(ent.images):
            blob_dir.mkdir(parents=True, exist_ok=True)
            name = f"{ordinal:05d}_{k}.img"
            write_image_blob(blob_dir / name, im)
            refs.append(f"{blob_dir.name}/{name}")
        lines.append(json.dumps(
            {"kind": "entity", "id": ent.id, "texts": list(ent.texts), "images": refs}))
    for rid in range(graph.n_relations):
        rel = graph.relations[rid]
        lines.append(json.dumps({"kind": "relation", "id": rel.id, "name": rel.name}))
    for trip in graph.triplets:
        lines.append(json.dumps({"kind": "triplet", "h": trip.head, "r": trip.relation, "t": trip.tail}))
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def _require(record: dict, key: str, kinds, line: int):
    if key not in record:
        raise GraphError(f"line {line}: {record.get('kind', '?')} record missing field {key!r}")
    value = record[key]
    if not isinstance(value, kinds):
        raise GraphError(f"line {line}: field {key!r} has wrong type {type(value).__name__}")
    return value


def ingest_graph(path: str | Path) -> KnowledgeGraph:
    """Parse and validate a JSONL graph file; errors name the offending line."""
    path = Path(path)
    entities: list[Entity] = []
    relations: list[Relation] = []
    triplet_rows: list[tuple[int, str, int, str]] = []
    seen_entities: dict[str, int] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise GraphError(f"line {line_no}: malformed JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise GraphError(f"line {line_no}: record must be a JSON object")
            kind = record.get("kind")
            if kind == "entity":
                eid = _require(record, "id", str, line_no)
                if eid in seen_entities:
                    raise GraphError(
                        f"line {line_no}: duplicate entity id {eid!r} (first seen on line {seen_entities[eid]})")
                seen_entities[eid] = line_no
                texts = _require(record, "texts", list, line_no)
                refs = _require(record, "images", list, line_no)
                images = []
                for ref in refs:
                    blob = path.parent / ref
                    if not blob.is_file():
                        raise GraphError(f"line {line_no}: entity {eid!r} image blob {ref!r} not found")
                    images.append(read_image_blob(blob))
                try:
                    ent = Entity(id=eid, texts=tuple(texts), images=tuple(images))
                    ent.validate()
                except GraphError as exc:
                    raise GraphError(f"line {line_no}: {exc}") from exc
                entities.append(ent)
            elif kind == "relation":
                rid = _require(record, "id", int, line_no)
                name = _require(record, "name", str, line_no)
                relations.append(Relation(id=rid, name=name))
            elif kind == "triplet":
                h = _require(record, "h", str, line_no)
                r = _require(record, "r", int, line_no)
                t = _require(record, "t", str, line_no)
                triplet_rows.append((line_no, h, r, t))
            else:
                raise GraphError(f"line {line_no}: unknown record kind {kind!r}")
    known = {e.id for e in entities}
    known_rel = {r.id for r in relations}
    triplets = []
    for line_no, h, r, t in triplet_rows:
        for end in (h, t):
            if end not in known:
                raise GraphError(f"line {line_no}: triplet references unknown entity {end!r}")
        if r not in known_rel:
            raise GraphError(f"line {line_no}: triplet references unknown relation {r}")
        triplets.append(Triplet(head=h, relation=r, tail=t))
    try:
        return KnowledgeGraph(entities, relations, triplets)
    except GraphError as exc:
        raise GraphError(f"{path.name}: {exc}") from exc


# ---------------------------------------------------------------------------
# image-text pair conversion


def convert_pair(
    image: np.ndarray,
    caption: str,
    index: int = 0,
    n_graph_relations: int = 0,
) -> tuple[list[Entity], list[Triplet]]:
    """Turn one image-caption pair into two entities and two directed edges.

    The image entity points at the text entity through the first reserved
    relation and the text entity points back through the second; reserved
    relation ids sit directly after the graph's own relations. Entities are
    fresh per pair, so repeated captions stay distinct.
    """
    if not caption.strip():
        raise GraphError(f"pair {index}: caption is empty")
    img_ent = Entity(id=f"pair{index}:img", images=(np.asarray(image, dtype=np.float32),))
    txt_ent = Entity(id=f"pair{index}:txt", texts=(caption,))
    image_of = n_graph_relations
    caption_of = n_graph_relations + 1
    trips = [
        Triplet(head=img_ent.id, relation=image_of, tail=txt_ent.id),
        Triplet(head=txt_ent.id, relation=caption_of, tail=img_ent.id),
    ]
    return [img_ent, txt_ent], trips


def pairs_to_graph(
    pairs: list[tuple[np.ndarray, str]],
    base_relation_names: tuple[str, ...] = (),
) -> KnowledgeGraph:
    """Assemble a graph from image-caption pairs.

    Relations are the base names (ids 0..n-1, typically another graph's
    relation set so ids stay aligned across training phases) followed by the
    two reserved pair relations; entities and edges come from the pairs only.
    """
    if any(name in RESERVED_RELATION_NAMES for name in base_relation_names):
        raise GraphError(f"base relations may not use the reserved names {RESERVED_RELATION_NAMES}")
    relations = [Relation(id=i, name=n) for i, n in enumerate(base_relation_names)]
    n_base = len(relations)
    for offset, name in enumerate(RESERVED_RELATION_NAMES):
        relations.append(Relation(id=n_base + offset, name=name))
    entities: list[Entity] = []
    triplets: list[Triplet] = []
    for i, (image, caption) in enumerate(pairs):
        ents, trips = convert_pair(image, caption, index=i, n_graph_relations=n_base)
        entities.extend(ents)
        triplets.extend(trips)
    return KnowledgeGraph(entities, relations, triplets)


def save_pairs(pairs: list[tuple[np.ndarray, str]], path: str | Path) -> None:
    """Write pairs as JSONL ({"image": blob ref, "caption": text}) plus blobs."""
    path = Path(path)
    blob_dir = _blob_dir(path)
    lines = []
    for i, (image, caption) in enumerate(pairs):
        blob_dir.mkdir(parents=True, exist_ok=True)
        name = f"{i:05d}.img"
        write_image_blob(blob_dir / name, image)
        lines.append(json.dumps({"image": f"{blob_dir.name}/{name}", "caption": caption}))
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_pairs(path: str | Path) -> list[tuple[np.ndarray, str]]:
    path = Path(path)
    pairs = []
    with open(path, encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise GraphError(f"line {line_no}: malformed JSON ({exc.msg})") from exc
            ref = _require(record, "image", str, line_no)
            caption = _require(record, "caption", str, line_no)
            blob = path.parent / ref
            if not blob.is_file():
                raise GraphError(f"line {line_no}: image blob {ref!r} not found")
            pairs.append((read_image_blob(blob), caption))
    return pairs


# ---------------------------------------------------------------------------
# batch sampling


@dataclass(frozen=True)
class SampledEnd:
    """One endpoint of a sampled edge, resolved to concrete content."""

    entity_id: str
    modality: str
    text: str | None = None
    image: np.ndarray | None = None

    @property
    def content(self):
        return self.text if self.modality == TEXT else self.image


@dataclass(frozen=True)
class BatchItem:
    triplet_index: int
    triplet: Triplet
    head: SampledEnd
    relation_id: int
    relation_name: str
    tail: SampledEnd


@dataclass
class TripletBatch:
    items: list[BatchItem]
    seed: int

    @property
    def size(self) -> int:
        return len(self.items)


def _sample_end(entity: Entity, rng: np.random.Generator) -> SampledEnd:
    descs = entity.descriptions()
    modality, content = descs[int(rng.integers(len(descs)))]
    if modality == TEXT:
        return SampledEnd(entity_id=entity.id, modality=TEXT, text=content)
    return SampledEnd(entity_id=entity.id, modality=IMAGE, image=content)


def sample_batch(graph: KnowledgeGraph, n: int, seed: int) -> TripletBatch:
    """Draw n triplets without replacement, with pairwise-distinct tails.

    Tail distinctness makes in-batch tails valid negatives for each other.
    Drawn by a greedy scan over a shuffled index order (plain rejection has a
    vanishing acceptance rate once n nears the entity count); multi-modal
    entities get a fresh uniform description choice per occurrence.
    """
    if n < 1:
        raise GraphError(f"batch size must be >= 1, got {n}")
    if graph.n_triplets < n:
        raise GraphError(f"graph has {graph.n_triplets} triplets, cannot sample {n}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(graph.n_triplets)
    idx = []
    tails_seen = set()
    for i in order:
        tail = graph.triplets[i].tail
        if tail not in tails_seen:
            tails_seen.add(tail)
            idx.append(int(i))
            if len(idx) == n:
                break
    else:
        raise GraphError(
            f"graph has only {len(tails_seen)} distinct tail entities, "
            f"cannot sample {n} triplets with distinct tails")
    items = []
    for i in idx:
        trip = graph.triplets[int(i)]
        head = _sample_end(graph.entities[trip.head], rng)
        tail = _sample_end(graph.entities[trip.tail], rng)
        resolved = dataclasses.replace(trip, head_modality=head.modality, tail_modality=tail.modality)
        items.append(BatchItem(
            triplet_index=int(i),
            triplet=resolved,
            head=head,
            relation_id=trip.relation,
            relation_name=graph.relations[trip.relation].name,
            tail=tail,
        ))
    return TripletBatch(items=items, seed=seed)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a deterministic synthetic graph.

    Each entity gets a latent class (its index modulo n_relations) and the
    relation on edge (h, t) is (class(h) - class(t)) mod n_relations, so the
    labeling is exactly recoverable from the entity contents.
    """

    n_entities: int
    n_relations: int
    n_triplets: int
    seed: int = 0
    modality_mix: float = 1.0
    image_size: int = 32
    image_channels: int = 3
    n_texts: int = 1
    n_images: int = 1

    def validate(self) -> None:
        if self.n_entities < 1:
            raise GraphError("n_entities must be >= 1")
        if self.n_relations < 1:
            raise GraphError("n_relations must be >= 1")
        cap = self.n_entities * (self.n_entities - 1)
        if not (0 <= self.n_triplets <= cap):
            raise GraphError(
                f"n_triplets must lie in [0, n*(n-1)={cap}], got {self.n_triplets}")
        if not (0.0 <= self.modality_mix <= 1.0):
            raise GraphError("modality_mix must lie in [0, 1]")
        if self.n_texts < 0 or self.n_images < 0 or self.n_texts + self.n_images < 1:
            raise GraphError("each entity needs at least one description")
        if self.image_size < 1 or self.image_channels < 1:
            raise GraphError("image dimensions must be positive")


def _entity_class(index: int, n_classes: int) -> int:
    return index % n_classes


def _synth_text(index: int, cls: int, variant: int) -> str:
    parts = [ADJECTIVES[cls % len(ADJECTIVES)], NOUNS[index % len(NOUNS)]]
    if index >= len(NOUNS):
        parts.append(NOUNS[(index // len(NOUNS)) % len(NOUNS)])
    if index >= len(NOUNS) ** 2:
        parts.append(str(index))
    if variant > 0:
        parts.insert(0, ("a", "the", "this", "that")[(variant - 1) % 4])
    return " ".join(parts)


def synth_image(key: int, cls: int, n_classes: int, size: int, channels: int, variant: int = 0) -> np.ndarray:
    """Procedural pattern: per-channel plaid keyed to ``key`` plus a class-position
    marker bar along the top edge. Deterministic; pixels in [0, 1]."""
    ys = np.arange(size, dtype=np.float32)[:, None] / size
    xs = np.arange(size, dtype=np.float32)[None, :] / size
    img = np.empty((size, size, channels), dtype=np.float32)
    for ch in range(channels):
        fx = 1 + (key + 3 * ch) % 5
        fy = 1 + (key // 5 + 2 * ch) % 5
        phase = 2.0 * np.pi * (((key * 0.137) + (variant * 0.29) + (ch * 0.41)) % 1.0)
        img[:, :, ch] = 0.5 + 0.5 * np.sin(2.0 * np.pi * (fx * xs + fy * ys) + phase)
    band = max(1, size // 8)
    img[:band, :, :] = 0.0
    lo = (cls % n_classes) * size // n_classes
    hi = max(lo + 1, ((cls % n_classes) + 1) * size // n_classes)
    img[:band, lo:hi, :] = 1.0
    return np.clip(img, 0.0, 1.0)


def synth_graph(spec: SynthSpec) -> KnowledgeGraph:
    """Generate a deterministic graph whose relation labels are learnable."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_rel = spec.n_relations
    if n_rel > len(RELATION_NAMES):
        names = list(RELATION_NAMES) + [f"linked to {i}" for i in range(n_rel - len(RELATION_NAMES))]
    else:
        names = list(RELATION_NAMES[:n_rel])
    relations = [Relation(id=i, name=names[i]) for i in range(n_rel)]
    has_both = rng.random(spec.n_entities) < spec.modality_mix
    entities = []
    single_toggle = 0
    for i in range(spec.n_entities):
        cls = _entity_class(i, n_rel)
        texts = tuple(_synth_text(i, cls, v) for v in range(spec.n_texts))
        images = tuple(
            synth_image(i, cls, n_rel, spec.image_size, spec.image_channels, variant=v)
            for v in range(spec.n_images)
        )
        if not has_both[i] and texts and images:
            if single_toggle % 2 == 0:
                images = ()
            else:
                texts = ()
            single_toggle += 1
        entities.append(Entity(id=f"e{i:04d}", texts=texts, images=images))
    # enumerate ordered pairs without the diagonal so no edge is a self-loop
    order = rng.permutation(spec.n_entities * (spec.n_entities - 1))[: spec.n_triplets]
    triplets = []
    for k in order:
        h, rem = divmod(int(k), spec.n_entities - 1)
        t = rem if rem < h else rem + 1
        r = (_entity_class(h, n_rel) - _entity_class(t, n_rel)) % n_rel
        triplets.append(Triplet(head=entities[h].id, relation=r, tail=entities[t].id))
    return KnowledgeGraph(entities, relations, triplets)


def synth_pairs(n_pairs: int, seed: int = 0, image_size: int = 32, channels: int = 3) -> list[tuple[np.ndarray, str]]:
    """Image-caption pairs where each caption names its image's pattern key,
    so pair retrieval is learnable. Distinct seeds give distinct pair sets."""
    if n_pairs < 1:
        raise GraphError("n_pairs must be >= 1")
    pairs = []
    for i in range(n_pairs):
        key = 4096 + 131 * seed + i
        adj = ADJECTIVES[key % len(ADJECTIVES)]
        noun = NOUNS[(key // len(ADJECTIVES)) % len(NOUNS)]
        caption = f"a photo of {adj} {noun}"
        image = synth_image(key, cls=key % 8, n_classes=8, size=image_size, channels=channels)
        pairs.append((image, caption))
    return pairs
