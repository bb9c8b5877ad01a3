# vslan/tests/conftest.py
"""Test fixtures and configuration."""
import socket
import threading
import time

import numpy as np
import pytest
import uvicorn
from fastapi.testclient import TestClient

from vslan.core.config import ModelDims, SyntheticConfig, load_run_config
from vslan.main import app
from vslan.models.data import ModelSpec, StreamSpec
from vslan.services.dataset import load_dataset
from vslan.services.network import build_model
from vslan.services.synthetic import gen_synthetic

TINY_DIMS = {"z": 5, "z_prime": 3, "x": 2, "y": 4, "delta": 3, "d_h": 6, "word_embed": 4, "pos_embed": 3}


@pytest.fixture
def rng():
    """Seeded generator for test inputs."""
    return np.random.default_rng(7)


@pytest.fixture
def tiny_dims():
    return ModelDims(**TINY_DIMS)


@pytest.fixture
def two_streams():
    return [
        StreamSpec(stream_id=0, name="coarse", dim=4, order_index=0),
        StreamSpec(stream_id=1, name="fine", dim=3, order_index=1),
    ]


@pytest.fixture
def tiny_spec(tiny_dims, two_streams):
    return ModelSpec(dims=tiny_dims, streams=two_streams, vocab_size=9, pos_vocab_size=15)


@pytest.fixture
def tiny_model(tiny_spec):
    """A two-stream model with the latent POS path and decoder LAN enabled."""
    return build_model(tiny_spec, seed=3)


@pytest.fixture
def synthetic_config():
    return SyntheticConfig(n_videos=6, n_clips=3, stream_dims=[6, 5], n_captions_per_video=2, noise_sigma=0.1, seed=11)


@pytest.fixture
def synthetic_dir(tmp_path, synthetic_config):
    """A generated dataset directory."""
    data_dir = tmp_path / "data"
    gen_synthetic(synthetic_config, data_dir)
    return data_dir


@pytest.fixture
def synthetic_dataset(synthetic_dir):
    return load_dataset(synthetic_dir)


@pytest.fixture
def run_config_dict(tmp_path, synthetic_dir, synthetic_config):
    """One epoch per phase at tiny dims."""
    return {
        "profile": "desk",
        "dims": dict(TINY_DIMS),
        "batch_size": 4,
        "lr": 1e-3,
        "vapen_warmup_epochs": 1,
        "xe_pretrain_epochs": 1,
        "shared_epochs": 1,
        "max_len": 12,
        "eval_videos": 4,
        "seed": 5,
        "paths": {"data_dir": str(synthetic_dir), "out_dir": str(tmp_path / "runs")},
        "synthetic": synthetic_config.model_dump(),
    }


@pytest.fixture
def run_config(run_config_dict):
    return load_run_config(run_config_dict)


@pytest.fixture
def test_client():
    """Create a test client for the scorer API."""
    return TestClient(app)


def _free_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


@pytest.fixture
def live_scorer():
    """The mock entailment scorer served on a free local port; yields its base URL."""
    port = _free_port()
    server = uvicorn.Server(uvicorn.Config(app, host="127.0.0.1", port=port, log_config=None))
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 10.0
    while not server.started:
        if time.monotonic() > deadline:
            raise RuntimeError("mock scorer did not start")
        time.sleep(0.02)
    yield f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(timeout=5.0)


@pytest.fixture
def dead_endpoint():
    """A local URL with nothing listening."""
    return f"http://127.0.0.1:{_free_port()}"


@pytest.fixture
def hanging_endpoint():
    """A local server that accepts connections and never answers; yields its base URL."""
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.bind(("127.0.0.1", 0))
    listener.listen(8)
    listener.settimeout(0.1)
    held, stop = [], threading.Event()

    def accept_forever():
        while not stop.is_set():
            try:
                conn, _ = listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            held.append(conn)

    thread = threading.Thread(target=accept_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{listener.getsockname()[1]}"
    stop.set()
    thread.join(timeout=1.0)
    for conn in held:
        conn.close()
    listener.close()
