"""Session service: explore a compressed volume over HTTP + WebSocket.

All rendering happens server side; clients are thin controllers that send
camera/transfer-function updates and display the frames streamed back.
Every applied control message runs one frame-loop step, so a frame is
delivered per update (plus one right after connecting).  Sessions are
isolated: each connection owns its cache and detail store; the container
is shared read-only.

The wire protocol is documented field by field in ``docs/protocol.md``:
text JSON control messages, binary frame messages with a fixed 25-byte
header (frame index, encoding tag, size, timing block, payload length).
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, replace

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .container import CsvContainer
from .render import (
    Camera,
    FrameLoop,
    RenderOptions,
    TransferFunction,
    image_to_bytes,
)

FRAME_HEADER = struct.Struct("<IBHHfffI")
ENCODING_TAGS = {"raw": 0, "png": 1, "jpeg": 2}


@dataclass(frozen=True)
class ServeOptions:
    width: int = 256
    height: int = 256
    encoding: str = "png"
    shadows: bool = False
    pool_bytes: int = 1 << 30
    detail_budget: int = 8 << 20
    fov: float = math.pi / 3


def default_camera(container: CsvContainer, options: ServeOptions) -> Camera:
    x, y, z = container.meta.dims
    cx, cy = x / 2.0, y / 2.0
    distance = 1.2 * max(x, y, z) / (2.0 * math.tan(options.fov / 2.0))
    return Camera(
        position=(cx, cy, -distance),
        forward=(0.0, 0.0, 1.0),
        up=(0.0, 1.0, 0.0),
        fov=options.fov,
        width=options.width,
        height=options.height,
    )


def metadata_dict(container: CsvContainer) -> dict:
    meta = container.meta
    return {
        "dims": list(meta.dims),
        "brick_side": meta.brick_side,
        "brick_log2": meta.brick_log2,
        "lod_range": [0, meta.brick_log2],
        "brick_count": meta.brick_count,
        "label_width": meta.width,
        "entropy": meta.entropy,
        "distinct_labels": int(np.unique(container.palette_blob).size),
    }


def encode_frame_payload(image: np.ndarray, encoding: str) -> bytes:
    rgb = image_to_bytes(image)
    if encoding == "raw":
        return rgb.tobytes()
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(rgb).save(buf, format="PNG" if encoding == "png" else "JPEG")
    return buf.getvalue()


def pack_frame(frame_index: int, encoding: str, image: np.ndarray, timings: dict) -> bytes:
    payload = encode_frame_payload(image, encoding)
    header = FRAME_HEADER.pack(
        frame_index,
        ENCODING_TAGS[encoding],
        image.shape[1],
        image.shape[0],
        timings.get("raymarch", 0.0) * 1000.0,
        timings.get("decompress", 0.0) * 1000.0,
        timings.get("assign", 0.0) * 1000.0,
        len(payload),
    )
    return header + payload


def unpack_frame(data: bytes) -> dict:
    """Parse one binary frame message (used by tests and simple clients)."""
    idx, tag, width, height, ray_ms, dec_ms, asn_ms, n = FRAME_HEADER.unpack_from(data, 0)
    payload = data[FRAME_HEADER.size : FRAME_HEADER.size + n]
    return {
        "frame_index": idx,
        "encoding": {v: k for k, v in ENCODING_TAGS.items()}[tag],
        "width": width,
        "height": height,
        "raymarch_ms": ray_ms,
        "decompress_ms": dec_ms,
        "assign_ms": asn_ms,
        "payload": payload,
    }


class SessionState:
    """One connected client: frame loop plus its presentation options."""

    def __init__(self, container: CsvContainer, options: ServeOptions, session_id: int):
        self.id = session_id
        self.serve_options = options
        self.encoding = options.encoding
        self.loop = FrameLoop(
            container,
            default_camera(container, options),
            TransferFunction(),
            RenderOptions(shadows=options.shadows),
            pool_bytes=options.pool_bytes,
            detail_budget=options.detail_budget,
        )

    def apply(self, message: dict) -> dict | None:
        """Apply one control message; returns an error dict for bad input."""
        kind = message.get("type")
        if kind == "camera":
            try:
                cam = Camera(
                    tuple(float(v) for v in message["position"]),
                    tuple(float(v) for v in message["forward"]),
                    tuple(float(v) for v in message["up"]),
                    float(message.get("fov", self.loop.camera.fov)),
                    self.loop.camera.width,
                    self.loop.camera.height,
                )
            except (KeyError, TypeError, ValueError) as exc:
                return {"type": "error", "reason": f"bad camera message: {exc}"}
            self.loop.set_camera(cam)
            return None
        if kind == "tf":
            try:
                overrides = {
                    int(o["label"]): tuple(float(v) for v in o["rgba"])
                    for o in message.get("overrides", [])
                }
                tf = TransferFunction(
                    default_alpha=float(message.get("default_alpha", 1.0)),
                    overrides=overrides,
                )
            except (KeyError, TypeError, ValueError) as exc:
                return {"type": "error", "reason": f"bad tf message: {exc}"}
            self.loop.set_transfer_function(tf)
            return None
        if kind == "options":
            enc = message.get("encoding", self.encoding)
            if enc not in ENCODING_TAGS:
                return {"type": "error", "reason": f"unknown encoding {enc!r}"}
            self.encoding = enc
            width = int(message.get("width", self.loop.camera.width))
            height = int(message.get("height", self.loop.camera.height))
            self.loop.set_camera(replace(self.loop.camera, width=width, height=height))
            opts = self.loop.options
            if "shadows" in message:
                opts = replace(opts, shadows=bool(message["shadows"]))
            if "empty_space_skipping" in message:
                opts = replace(opts, empty_space_skipping=bool(message["empty_space_skipping"]))
            self.loop.options = opts
            return None
        return {"type": "error", "reason": f"unknown message type {kind!r}"}

    def frame(self) -> bytes:
        image, timings = self.loop.step()
        return pack_frame(self.loop.frame_index - 1, self.encoding, image, timings)

    def stats(self) -> dict:
        return self.loop.stats()


def create_app(container: CsvContainer, options: ServeOptions = ServeOptions()) -> FastAPI:
    """Build the FastAPI application serving one container."""
    app = FastAPI(title="csvol stream service")
    app.state.container = container
    app.state.options = options
    app.state.sessions: dict[int, SessionState] = {}
    app.state.next_session = 0

    @app.get("/metadata")
    def metadata():
        return metadata_dict(container)

    @app.get("/labels")
    def labels(limit: int = 64):
        uniq = np.unique(container.palette_blob)
        step = max(1, uniq.size // max(1, limit))
        return {"labels": uniq[::step][:limit].tolist(), "total": int(uniq.size)}

    @app.get("/stats")
    def stats():
        return {
            "sessions": {str(sid): s.stats() for sid, s in app.state.sessions.items()},
        }

    @app.websocket("/session")
    async def session(ws: WebSocket):
        await ws.accept()
        sid = app.state.next_session
        app.state.next_session += 1
        state = SessionState(container, options, sid)
        app.state.sessions[sid] = state
        try:
            await ws.send_text(
                json.dumps({"type": "hello", "session": sid, "metadata": metadata_dict(container)})
            )
            await ws.send_bytes(state.frame())
            while True:
                raw = await ws.receive_text()
                try:
                    message = json.loads(raw)
                except json.JSONDecodeError as exc:
                    await ws.send_text(json.dumps({"type": "error", "reason": f"bad json: {exc}"}))
                    continue
                if message.get("type") == "stats_request":
                    await ws.send_text(json.dumps({"type": "stats", "stats": state.stats()}))
                    continue
                error = state.apply(message)
                if error is not None:
                    await ws.send_text(json.dumps(error))
                    continue
                await ws.send_bytes(state.frame())
        except WebSocketDisconnect:
            pass
        finally:
            app.state.sessions.pop(sid, None)

    return app


def serve(container_path: str, host: str = "127.0.0.1", port: int = 8840, options: ServeOptions = ServeOptions(), detail_cold: bool = True):
    """Load a container and run the service (blocking)."""
    import uvicorn

    container = CsvContainer.open(container_path, detail_cold=detail_cold)
    app = create_app(container, options)
    uvicorn.run(app, host=host, port=port, log_level="warning")
