# vslan/services/synthetic.py
"""
Synthetic scene corpus.

Every video is a SceneProgram (subject, verb, object, location). Stream m
renders the program as A_m @ (one-hot fields scaled by that stream's field
weights) plus Gaussian noise, with A_m a fixed random projection. Early
streams weight the verb, late streams the object and location. Captions come
from templates with gold POS tags.
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from vslan.core.config import SyntheticConfig
from vslan.models.data import ManifestEntry, SceneProgram, StreamSpec
from vslan.models.vocab import Vocabulary
from vslan.services.dataset import (
    CAPTIONS_FILE,
    FEATURES_DIR,
    MANIFEST_FILE,
    VOCAB_FILE,
    write_features,
    write_streams,
)

logger = logging.getLogger(__name__)

SUBJECTS = ("man", "woman", "boy", "girl", "dog", "cat", "chef", "player")
# base, -ing, third person
VERBS = (
    ("play", "playing", "plays"),
    ("cut", "cutting", "cuts"),
    ("ride", "riding", "rides"),
    ("throw", "throwing", "throws"),
    ("eat", "eating", "eats"),
    ("wash", "washing", "washes"),
    ("push", "pushing", "pushes"),
    ("carry", "carrying", "carries"),
)
OBJECTS = ("ball", "guitar", "bread", "bike", "box", "car", "apple", "cart")
LOCATIONS = ("kitchen", "park", "street", "room", "garden", "yard")

TEMPLATES: Tuple[Tuple[Tuple[str, str], ...], ...] = (
    (("a", "DET"), ("{subj}", "NOUN"), ("is", "VERB"), ("{ing}", "VERB"), ("a", "DET"), ("{obj}", "NOUN")),
    (("the", "DET"), ("{subj}", "NOUN"), ("{s}", "VERB"), ("the", "DET"), ("{obj}", "NOUN"),
     ("in", "ADP"), ("the", "DET"), ("{loc}", "NOUN")),
    (("a", "DET"), ("{subj}", "NOUN"), ("{s}", "VERB"), ("a", "DET"), ("{obj}", "NOUN")),
    (("someone", "PRON"), ("is", "VERB"), ("{ing}", "VERB"), ("a", "DET"), ("{obj}", "NOUN"),
     ("in", "ADP"), ("the", "DET"), ("{loc}", "NOUN")),
    (("in", "ADP"), ("the", "DET"), ("{loc}", "NOUN"), ("a", "DET"), ("{subj}", "NOUN"), ("is", "VERB"),
     ("{ing}", "VERB"), ("the", "DET"), ("{obj}", "NOUN")),
    (("the", "DET"), ("{subj}", "NOUN"), ("is", "VERB"), ("quickly", "ADV"), ("{ing}", "VERB"),
     ("a", "DET"), ("{obj}", "NOUN")),
)

FIELD_SIZES = (len(SUBJECTS), len(VERBS), len(OBJECTS), len(LOCATIONS))
LATENT_DIM = sum(FIELD_SIZES)

# field weights (subject, verb, object, location) of the first and last stream
_FIRST_STREAM = np.array([0.5, 1.0, 0.2, 0.1])
_LAST_STREAM = np.array([0.3, 0.2, 1.0, 1.0])


def stream_field_weights(m: int, n_streams: int) -> np.ndarray:
    t = m / (n_streams - 1) if n_streams > 1 else 0.0
    return (1.0 - t) * _FIRST_STREAM + t * _LAST_STREAM


def program_code(program: SceneProgram, weights: np.ndarray) -> np.ndarray:
    """Field one-hots scaled by the stream's field weights, [LATENT_DIM]."""
    code = np.zeros(LATENT_DIM)
    offset = 0
    for size, index, w in zip(FIELD_SIZES, (program.subject_id, program.verb_id, program.object_id,
                                            program.location_id), weights):
        code[offset + index] = w
        offset += size
    return code


def noiseless_clips(program: SceneProgram, projection: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """[n_clips, v_m] rendering; the verb's strength ramps up over the clips."""
    verb_slice = slice(FIELD_SIZES[0], FIELD_SIZES[0] + FIELD_SIZES[1])
    ramp = np.linspace(0.75, 1.25, program.n_clips) if program.n_clips > 1 else np.ones(1)
    rows = []
    for factor in ramp:
        code = program_code(program, weights)
        code[verb_slice] *= factor
        rows.append(projection @ code)
    return np.stack(rows)


def render_caption(program: SceneProgram, template: Sequence[Tuple[str, str]]) -> Tuple[str, List[str]]:
    _, ing, third = VERBS[program.verb_id]
    slots = {
        "subj": SUBJECTS[program.subject_id],
        "obj": OBJECTS[program.object_id],
        "loc": LOCATIONS[program.location_id],
        "ing": ing,
        "s": third,
    }
    words = [word.format(**slots) for word, _ in template]
    return " ".join(words), [tag for _, tag in template]


def draw_program(rng: np.random.Generator, n_clips: int) -> SceneProgram:
    return SceneProgram(
        subject_id=int(rng.integers(len(SUBJECTS))),
        verb_id=int(rng.integers(len(VERBS))),
        object_id=int(rng.integers(len(OBJECTS))),
        location_id=int(rng.integers(len(LOCATIONS))),
        n_clips=n_clips,
    )


def stream_specs(config: SyntheticConfig) -> List[StreamSpec]:
    return [StreamSpec(stream_id=m, name=f"synthetic{m}", dim=d, order_index=m) for m, d in enumerate(config.stream_dims)]


def gen_synthetic(config: SyntheticConfig, data_dir: Union[str, Path]) -> Dict:
    """Write a complete dataset directory; equal configs give byte-identical files."""
    root = Path(data_dir)
    (root / FEATURES_DIR).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    specs = stream_specs(config)
    n_streams = len(specs)
    projections = [rng.standard_normal((s.dim, LATENT_DIM)) for s in specs]
    weights = [stream_field_weights(m, n_streams) for m in range(n_streams)]

    manifest: Dict[str, Dict] = {}
    caption_lines: List[str] = []
    program_lines: List[str] = []
    texts: List[str] = []
    for i in range(config.n_videos):
        video_id = f"vid{i:05d}"
        program = draw_program(rng, config.n_clips)
        paths = []
        for m, spec in enumerate(specs):
            clips = noiseless_clips(program, projections[m], weights[m])
            clips = clips + config.noise_sigma * rng.standard_normal(clips.shape)
            rel = f"{FEATURES_DIR}/{video_id}_{spec.name}.vslf"
            write_features(root / rel, clips)
            paths.append(rel)
        picks = rng.choice(len(TEMPLATES), size=config.n_captions_per_video,
                           replace=config.n_captions_per_video > len(TEMPLATES))
        for k in picks:
            caption, tags = render_caption(program, TEMPLATES[int(k)])
            caption_lines.append(json.dumps({"video_id": video_id, "caption": caption, "pos": tags}, sort_keys=True))
            texts.append(caption)
        manifest[video_id] = ManifestEntry(streams=paths, captions=len(picks)).model_dump()
        program_lines.append(json.dumps({"video_id": video_id, **program.model_dump()}, sort_keys=True))

    vocab = Vocabulary.build(texts)
    write_streams(root, specs)
    (root / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (root / CAPTIONS_FILE).write_text("\n".join(caption_lines) + "\n", encoding="utf-8")
    (root / "programs.jsonl").write_text("\n".join(program_lines) + "\n", encoding="utf-8")
    vocab.save(root / VOCAB_FILE)
    summary = {
        "data_dir": str(root),
        "n_videos": config.n_videos,
        "n_captions": len(caption_lines),
        "vocab_size": len(vocab),
        "streams": [s.model_dump() for s in specs],
    }
    logger.info(f"generated {config.n_videos} synthetic videos in {root}")
    return summary
