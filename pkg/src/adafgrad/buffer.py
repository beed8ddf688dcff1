"""Fixed-capacity rehearsal buffer with uniform reservoir admission.

Every training step offers the current slide and its stored head gradient to
the buffer; once full, a new arrival replaces a uniformly random slot with
probability capacity / n_seen, which keeps the buffer a uniform sample of
the whole stream. Stored gradients are written once and never refreshed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, EmptyBufferError, FormatError
from .model import SlideFeatures

_MAGIC = b"WSB1"


@dataclass(eq=False)
class BufferItem:
    slide: SlideFeatures
    stored_grad: np.ndarray
    stream_index: int


class RehearsalBuffer:
    """Reservoir over (slide, stored head gradient) pairs."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigurationError(f"buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.items: list[BufferItem] = []
        self.n_seen = 0

    def __len__(self) -> int:
        return len(self.items)

    def conditional_add(self, slide: SlideFeatures, stored_grad: np.ndarray,
                        rng: np.random.Generator) -> None:
        """Offer one sample to the reservoir; n_seen counts every offer."""
        grad = np.array(stored_grad, dtype=np.float64, copy=True)
        grad.flags.writeable = False
        item = BufferItem(slide=slide, stored_grad=grad, stream_index=self.n_seen)
        self.n_seen += 1
        if len(self.items) < self.capacity:
            self.items.append(item)
            return
        j = int(rng.integers(0, self.n_seen))
        if j < self.capacity:
            self.items[j] = item

    def sample_replay(self, rng: np.random.Generator):
        """Uniform draw over the current contents; the item stays put."""
        if not self.items:
            raise EmptyBufferError("cannot replay from an empty buffer")
        item = self.items[int(rng.integers(0, len(self.items)))]
        return item.slide, item.stored_grad


def _write_str(fh, s: str):
    raw = s.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_exact(fh, n: int, path) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError(f"truncated buffer checkpoint: {path}")
    return raw


def save_buffer(buf: RehearsalBuffer, path) -> None:
    """Checkpoint for pause/resume. Features stay float32, gradients float64."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        d_model = buf.items[0].stored_grad.shape[0] if buf.items else 0
        fh.write(struct.pack("<IQII", buf.capacity, buf.n_seen, len(buf.items), d_model))
        for item in buf.items:
            s = item.slide
            fh.write(struct.pack("<IIII", item.stream_index, s.task_index,
                                 s.class_in_task, s.global_class))
            _write_str(fh, s.slide_id)
            fh.write(struct.pack("<III", s.n_regions, s.k, s.d_vis))
            fh.write(np.ascontiguousarray(s.regions, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.patches, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(item.stored_grad, dtype="<f8").tobytes())


def load_buffer(path) -> RehearsalBuffer:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise FormatError(f"bad magic in buffer checkpoint: {path}")
        capacity, n_seen, n_items, d_model = struct.unpack(
            "<IQII", _read_exact(fh, 20, path))
        if n_items > capacity:
            raise FormatError(f"checkpoint holds {n_items} items over capacity "
                              f"{capacity}: {path}")
        buf = RehearsalBuffer(capacity)
        buf.n_seen = n_seen
        for _ in range(n_items):
            stream_index, task_index, class_in_task, global_class = struct.unpack(
                "<IIII", _read_exact(fh, 16, path))
            (id_len,) = struct.unpack("<H", _read_exact(fh, 2, path))
            slide_id = _read_exact(fh, id_len, path).decode("utf-8")
            n_r, k, d_vis = struct.unpack("<III", _read_exact(fh, 12, path))
            regions = np.frombuffer(
                _read_exact(fh, 4 * n_r * d_vis, path), dtype="<f4"
            ).reshape(n_r, d_vis)
            patches = np.frombuffer(
                _read_exact(fh, 4 * n_r * k * k * d_vis, path), dtype="<f4"
            ).reshape(n_r, k * k, d_vis)
            grad = np.frombuffer(
                _read_exact(fh, 8 * d_model, path), dtype="<f8").copy()
            grad.flags.writeable = False
            slide = SlideFeatures(
                slide_id=slide_id, task_index=task_index,
                class_in_task=class_in_task, global_class=global_class,
                regions=regions, patches=patches,
            )
            buf.items.append(BufferItem(slide=slide, stored_grad=grad,
                                        stream_index=stream_index))
        if fh.read(1):
            raise FormatError(f"trailing bytes in buffer checkpoint: {path}")
    return buf
