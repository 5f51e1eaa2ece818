import io
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
import torch
from hypothesis import settings
from PIL import Image

from dermsynth.prompts import ConditionSpec

settings.register_profile("fast", max_examples=20)

LABELS = ("atopic_dermatitis", "urticaria_hives", "scabies", "warts")


def make_specs(labels=LABELS):
    return [
        ConditionSpec(
            label=label,
            display_name=label.replace("_", " ").title(),
            visual_cues_pool=(f"{label} cue one", f"{label} cue two"),
            sensation_pool=("itching",) if i % 2 == 0 else (),
            location_pool=("on the arm", "on the leg", "on the neck"),
        )
        for i, label in enumerate(labels)
    ]


@pytest.fixture
def specs():
    return make_specs()


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


def png_bytes(width=32, height=32, color=(120, 80, 60)):
    buf = io.BytesIO()
    Image.new("RGB", (width, height), color).save(buf, format="PNG")
    return buf.getvalue()


def write_image_tree(root, sizes, size=(40, 40), seed=0):
    """Write ``sizes[label]`` random PNGs per class folder."""
    rng = np.random.default_rng(seed)
    for label, n in sizes.items():
        d = root / label
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            px = rng.integers(0, 256, size=(size[1], size[0], 3), dtype=np.uint8)
            Image.fromarray(px).save(d / f"img_{i:03d}.png")
    return root


class StubServer:
    """Local HTTP server that replays a scripted list of (status, content_type, body) replies."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.requests = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                stub.requests.append({"body": json.loads(self.rfile.read(length)), "headers": dict(self.headers)})
                status, ctype, body = stub.replies.pop(0) if len(stub.replies) > 1 else stub.replies[0]
                self.send_response(status)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self):
        return f"http://127.0.0.1:{self.server.server_address[1]}/generate"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_server():
    servers = []

    def start(replies):
        s = StubServer(replies).__enter__()
        servers.append(s)
        return s

    yield start
    for s in servers:
        s.__exit__()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
