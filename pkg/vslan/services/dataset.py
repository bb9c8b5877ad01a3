# vslan/services/dataset.py
"""
On-disk dataset layout and batching.

    <data_dir>/streams.json      stream specs in stack order
    <data_dir>/manifest.json     {video_id: {"streams": [relative paths], "captions": count}}
    <data_dir>/captions.jsonl    {"video_id", "caption", "pos": [tags]} per line
    <data_dir>/vocab.txt         one token per line, line number = index
    <data_dir>/features/*.vslf   one feature file per (video, stream)

Feature file: magic "VSLF", u32 version, u32 clip count, u32 dim, then
clip-major little-endian float32 values.
"""
import json
import logging
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Union

import numpy as np
from pydantic import ValidationError

from vslan.core.exceptions import (
    BadMagicError,
    DataError,
    FeatureFileError,
    TruncatedFileError,
    VersionMismatchError,
)
from vslan.models.data import CaptionRecord, FeatureStream, ManifestEntry, StreamSpec, VideoExample
from vslan.models.vocab import PAD, POS_PAD, PosTagset, Vocabulary
from vslan.utils.text import tokenize

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"VSLF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")

STREAMS_FILE = "streams.json"
MANIFEST_FILE = "manifest.json"
CAPTIONS_FILE = "captions.jsonl"
VOCAB_FILE = "vocab.txt"
FEATURES_DIR = "features"

PathLike = Union[str, Path]


def write_features(path: PathLike, clips: np.ndarray) -> None:
    clips = np.asarray(clips)
    if clips.ndim != 2:
        raise FeatureFileError(f"feature arrays must be [clips, dim], got shape {clips.shape}")
    payload = np.ascontiguousarray(clips, dtype="<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, clips.shape[0], clips.shape[1]) + payload)


def read_features(path: PathLike) -> np.ndarray:
    """Stored float32 values as a [clips, dim] array."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header needs {_HEADER.size} bytes, file has {len(raw)}")
    magic, version, n_clips, dim = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {FEATURE_VERSION}")
    expected = n_clips * dim * 4
    payload = raw[_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedFileError(f"{path}: payload has {len(payload)} bytes, header promises {expected}")
    if len(payload) > expected:
        raise FeatureFileError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").reshape(n_clips, dim).copy()


@dataclass
class Dataset:
    root: Path
    streams: List[StreamSpec]
    videos: List[VideoExample]
    vocab: Vocabulary
    tagset: PosTagset = field(default_factory=PosTagset)

    def video(self, video_id: str) -> VideoExample:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise DataError(f"unknown video id {video_id!r}")


@dataclass
class Batch:
    videos: List[VideoExample]
    streams: List[np.ndarray]      # per stream [B, N, v_m]
    tokens: np.ndarray             # [B, T+1], BOS ... EOS PAD*
    pos: np.ndarray                # [B, T+1], aligned with tokens
    references: List[List[str]]    # every caption text of each row's video

    @property
    def size(self) -> int:
        return len(self.videos)


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise DataError(f"missing dataset file: {path}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON: {e}") from e


def write_streams(root: Path, streams: Sequence[StreamSpec]) -> None:
    payload = [s.model_dump() for s in sorted(streams, key=lambda s: s.order_index)]
    (root / STREAMS_FILE).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_streams(root: Path) -> List[StreamSpec]:
    try:
        streams = [StreamSpec.model_validate(s) for s in _read_json(root / STREAMS_FILE)]
    except ValidationError as e:
        raise DataError(f"invalid {STREAMS_FILE}: {e}") from e
    return sorted(streams, key=lambda s: s.order_index)


def read_captions(path: Path) -> List[CaptionRecord]:
    records = []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError as e:
        raise DataError(f"missing dataset file: {path}") from e
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            records.append(CaptionRecord.model_validate_json(line))
        except ValidationError as e:
            raise DataError(f"{path}:{lineno}: invalid caption record: {e}") from e
    return records


def load_dataset(data_dir: PathLike, vocab: Optional[Vocabulary] = None) -> Dataset:
    """Read a dataset directory; features are widened to float64 in memory."""
    root = Path(data_dir)
    streams = read_streams(root)
    try:
        manifest = {vid: ManifestEntry.model_validate(e) for vid, e in _read_json(root / MANIFEST_FILE).items()}
    except ValidationError as e:
        raise DataError(f"invalid {MANIFEST_FILE}: {e}") from e
    records = read_captions(root / CAPTIONS_FILE)
    if vocab is None:
        vocab_path = root / VOCAB_FILE
        vocab = Vocabulary.load(vocab_path) if vocab_path.exists() else Vocabulary.build(r.caption for r in records)
    tagset = PosTagset()

    by_video: Dict[str, List[CaptionRecord]] = defaultdict(list)
    for r in records:
        by_video[r.video_id].append(r)

    videos = []
    for video_id in sorted(manifest):
        entry = manifest[video_id]
        if len(entry.streams) != len(streams):
            raise DataError(f"video {video_id} lists {len(entry.streams)} streams, dataset has {len(streams)}")
        captions = by_video.get(video_id, [])
        if len(captions) != entry.captions:
            raise DataError(f"video {video_id}: manifest says {entry.captions} captions, found {len(captions)}")
        features = []
        for spec, rel in zip(streams, entry.streams):
            clips = read_features(root / rel).astype(np.float64)
            if clips.shape[1] != spec.dim:
                raise DataError(f"{rel}: dim {clips.shape[1]} does not match stream {spec.name} ({spec.dim})")
            features.append(FeatureStream(spec=spec, clips=clips))
        token_seqs, pos_seqs = [], []
        for r in captions:
            words = tokenize(r.caption)
            if len(words) != len(r.pos):
                raise DataError(f"video {video_id}: caption {r.caption!r} has {len(words)} words, {len(r.pos)} tags")
            token_seqs.append(vocab.encode(words))
            pos_seqs.append(tagset.encode(r.pos))
        videos.append(VideoExample(
            video_id=video_id,
            streams=features,
            captions=token_seqs,
            pos=pos_seqs,
            texts=[r.caption for r in captions],
        ))
    logger.info(f"loaded {len(videos)} videos, {len(records)} captions, vocab {len(vocab)} from {root}")
    return Dataset(root=root, streams=streams, videos=videos, vocab=vocab, tagset=tagset)


def pad_sequences(seqs: Sequence[Sequence[int]], pad: int) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def make_batch(videos: Sequence[VideoExample], caption_idx: Sequence[int]) -> Batch:
    return Batch(
        videos=list(videos),
        streams=[np.stack([v.streams[m].clips for v in videos]) for m in range(len(videos[0].streams))],
        tokens=pad_sequences([v.captions[i] for v, i in zip(videos, caption_idx)], PAD),
        pos=pad_sequences([v.pos[i] for v, i in zip(videos, caption_idx)], POS_PAD),
        references=[list(v.texts) for v in videos],
    )


def batch_iter(videos: Sequence[VideoExample], batch_size: int, seed: int) -> Iterator[Batch]:
    """
    One epoch over every (video, caption) pair, shuffled under ``seed``.

    Pairs are grouped by clip count so every batch stacks into dense arrays;
    captions are padded to the longest in the batch.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    rng = np.random.default_rng(seed)
    groups: Dict[int, List[tuple]] = defaultdict(list)
    for vi, video in enumerate(videos):
        for ci in range(len(video.captions)):
            groups[video.n_clips].append((vi, ci))
    chunks = []
    for n_clips in sorted(groups):
        pairs = groups[n_clips]
        order = rng.permutation(len(pairs))
        shuffled = [pairs[i] for i in order]
        chunks.extend(shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size))
    for k in rng.permutation(len(chunks)):
        chunk = chunks[k]
        yield make_batch([videos[vi] for vi, _ in chunk], [ci for _, ci in chunk])
