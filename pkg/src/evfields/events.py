"""Event records, ESIM-style simulation, count queries, per-pixel threshold
estimation, void sampling and frame association.

The simulator follows the standard contrast-threshold rule: per pixel, the
log intensity L = ln(max(I_mono, floor)) is linearly interpolated between
consecutive frames and an event fires each time L crosses reference +/- tau,
after which the reference moves to the crossed level.  Event timestamps are
the interpolated crossing times.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import Pose

LOG_FLOOR = 1e-3      # guards ln(0); same order as common simulator settings
TAU_MIN, TAU_MAX = 1e-4, 2.0

_LUMA = np.array([0.2126, 0.7152, 0.0722])

_EVT_DTYPE = np.dtype([("t", "<f8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "V3")])


def luminance(image: np.ndarray) -> np.ndarray:
    """Rec.709 luma; passes monochrome images through unchanged."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim >= 1 and img.shape[-1] == 3:
        return img @ _LUMA
    return img


def log_intensity(image: np.ndarray, floor: float = LOG_FLOOR) -> np.ndarray:
    return np.log(np.maximum(luminance(image), floor))


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t: float
    polarity: int

    def __post_init__(self):
        if self.polarity not in (-1, 1):
            raise ValueError("polarity must be +1 or -1")
        if not np.isfinite(self.t):
            raise ValueError("event time must be finite")


@dataclass(frozen=True)
class FrameRecord:
    """Posed RGB frame: image is HxWx3 linear intensities in [0, 1]."""

    image: np.ndarray
    t: float
    pose: Pose

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"frame image must be HxWx3, got {img.shape}")
        if img.min() < -1e-9 or img.max() > 1.0 + 1e-9:
            raise ValueError("frame intensities must lie in [0, 1]")
        img = img.copy()
        img.flags.writeable = False
        object.__setattr__(self, "image", img)


class ThresholdMap:
    """Per-pixel positive/negative contrast thresholds, clamped to [1e-4, 2]."""

    def __init__(self, tau_pos, tau_neg):
        tp = np.asarray(tau_pos, dtype=np.float64)
        tn = np.asarray(tau_neg, dtype=np.float64)
        if tp.shape != tn.shape or tp.ndim != 2:
            raise ValueError("tau maps must be matching HxW arrays")
        if tp.min() < TAU_MIN - 1e-12 or tp.max() > TAU_MAX + 1e-12 \
                or tn.min() < TAU_MIN - 1e-12 or tn.max() > TAU_MAX + 1e-12:
            raise ValueError(f"thresholds must lie in [{TAU_MIN}, {TAU_MAX}]")
        self.tau_pos = tp.copy()
        self.tau_neg = tn.copy()
        self.tau_pos.flags.writeable = False
        self.tau_neg.flags.writeable = False

    @staticmethod
    def constant(tau: float, width: int, height: int) -> "ThresholdMap":
        m = np.full((height, width), float(tau))
        return ThresholdMap(m, m)


class EventStream:
    """Immutable stream sorted by t with deterministic (t, y, x, polarity) order."""

    def __init__(self, t, x, y, polarity, width: int, height: int, presorted=False):
        t = np.asarray(t, dtype=np.float64)
        x = np.asarray(x, dtype=np.int32)
        y = np.asarray(y, dtype=np.int32)
        p = np.asarray(polarity, dtype=np.int8)
        if not (t.shape == x.shape == y.shape == p.shape):
            raise ValueError("event field arrays must share a shape")
        if t.size and (x.min() < 0 or x.max() >= width or y.min() < 0 or y.max() >= height):
            raise ValueError("event coordinates outside sensor bounds")
        if t.size and not np.all(np.isfinite(t)):
            raise ValueError("event times must be finite")
        if t.size and not np.all(np.abs(p) == 1):
            raise ValueError("polarities must be +1 or -1")
        if not presorted:
            order = np.lexsort((p, x, y, t))
            t, x, y, p = t[order], x[order], y[order], p[order]
        for arr in (t, x, y, p):
            arr.flags.writeable = False
        self.t, self.x, self.y, self.polarity = t, x, y, p
        self.width, self.height = int(width), int(height)
        self._pixel_index = None

    def __len__(self):
        return self.t.size

    @staticmethod
    def empty(width: int, height: int) -> "EventStream":
        return EventStream(np.empty(0), np.empty(0, np.int32), np.empty(0, np.int32),
                           np.empty(0, np.int8), width, height, presorted=True)

    def events(self) -> list[Event]:
        return [Event(int(x), int(y), float(t), int(p))
                for t, x, y, p in zip(self.t, self.x, self.y, self.polarity)]

    def _index(self):
        """Per-pixel view: events regrouped by pixel, each group time-sorted."""
        if self._pixel_index is None:
            pix = self.y.astype(np.int64) * self.width + self.x
            order = np.lexsort((self.t, pix))
            starts = np.searchsorted(pix[order], np.arange(self.width * self.height))
            ends = np.searchsorted(pix[order], np.arange(self.width * self.height), side="right")
            self._pixel_index = (order, starts, ends)
        return self._pixel_index

    def pixel_events(self, x: int, y: int):
        """(times, polarities) of this pixel, time-sorted."""
        order, starts, ends = self._index()
        pid = y * self.width + x
        sel = order[starts[pid]:ends[pid]]
        return self.t[sel], self.polarity[sel]

    def occupied_mask(self, t0: float, t1: float) -> np.ndarray:
        """HxW bool mask of pixels with at least one event in (t0, t1]."""
        lo = np.searchsorted(self.t, t0, side="right")
        hi = np.searchsorted(self.t, t1, side="right")
        mask = np.zeros((self.height, self.width), dtype=bool)
        mask[self.y[lo:hi], self.x[lo:hi]] = True
        return mask

    def merged_with(self, other: "EventStream") -> "EventStream":
        return EventStream(np.concatenate([self.t, other.t]),
                           np.concatenate([self.x, other.x]),
                           np.concatenate([self.y, other.y]),
                           np.concatenate([self.polarity, other.polarity]),
                           self.width, self.height)


# ---------------------------------------------------------------------------
# simulation


def simulate_events(frames, times=None, tau_pos: float = 0.1, tau_neg: float | None = None,
                    floor: float = LOG_FLOOR) -> EventStream:
    """Simulate an event stream from a dense frame sequence.

    ``frames`` is either a list of FrameRecord or an array (T, H, W[, 3]) with
    ``times``.  Crossing counts use floor((|dL|)/tau + 1e-9); the tiny bias
    keeps counts stable when exact linear-interpolant frames are inserted.
    """
    if tau_neg is None:
        tau_neg = tau_pos
    if tau_pos <= 0 or tau_neg <= 0:
        raise ValueError("thresholds must be positive")
    if times is None:
        if len(frames) < 2:
            raise ValueError("need at least 2 frames")
        times = np.array([f.t for f in frames], dtype=np.float64)
        stack = np.stack([f.image for f in frames])
    else:
        stack = np.asarray(frames, dtype=np.float64)
        times = np.asarray(times, dtype=np.float64)
    if stack.shape[0] < 2:
        raise ValueError("need at least 2 frames")
    if np.any(np.diff(times) <= 0):
        raise ValueError("frame timestamps must be strictly increasing")

    height, width = stack.shape[1], stack.shape[2]
    logs = np.log(np.maximum(luminance(stack), floor))        # (T, H, W)

    ref = logs[0].copy()
    ts_out, xs_out, ys_out, ps_out = [], [], [], []
    yy, xx = np.mgrid[0:height, 0:width]

    for k in range(stack.shape[0] - 1):
        L0, L1 = logs[k], logs[k + 1]
        t0, t1 = times[k], times[k + 1]
        span = L1 - L0
        for sign, tau in ((1, tau_pos), (-1, tau_neg)):
            d = sign * (L1 - ref)
            counts = np.floor(d / tau + 1e-9).astype(np.int64)
            counts[d <= 0] = 0
            sel = counts > 0
            if not np.any(sel):
                continue
            c = counts[sel]
            total = int(c.sum())
            reps_y = np.repeat(yy[sel], c)
            reps_x = np.repeat(xx[sel], c)
            offsets = np.concatenate([[0], np.cumsum(c)[:-1]])
            step = np.arange(total) - np.repeat(offsets, c) + 1
            levels = np.repeat(ref[sel], c) + sign * tau * step
            seg_l0 = np.repeat(L0[sel], c)
            seg_span = np.repeat(span[sel], c)
            safe = np.where(seg_span == 0.0, 1.0, seg_span)
            frac = np.clip((levels - seg_l0) / safe, 0.0, 1.0)
            frac = np.where(seg_span == 0.0, 1.0, frac)
            ts_out.append(t0 + frac * (t1 - t0))
            xs_out.append(reps_x)
            ys_out.append(reps_y)
            ps_out.append(np.full(total, sign, dtype=np.int8))
            ref[sel] += sign * tau * c
        # pixels keep their reference across frames; only L advances

    if not ts_out:
        return EventStream.empty(width, height)
    return EventStream(np.concatenate(ts_out), np.concatenate(xs_out),
                       np.concatenate(ys_out), np.concatenate(ps_out), width, height)


# ---------------------------------------------------------------------------
# queries


def effective_count(s: EventStream, x: int, y: int, t0: float, t1: float,
                    thresholds: ThresholdMap | None = None):
    """Signed event count n_e = n_pos - n_neg at (x, y) over the window (t0, t1].

    With a ThresholdMap, also returns the signed log change estimate
    dL_hat = n_pos * tau_pos(x, y) - n_neg * tau_neg(x, y).
    """
    if t1 < t0:
        raise ValueError("require t0 <= t1")
    times, pols = s.pixel_events(x, y)
    lo = np.searchsorted(times, t0, side="right")
    hi = np.searchsorted(times, t1, side="right")
    window = pols[lo:hi]
    n_pos = int(np.count_nonzero(window > 0))
    n_neg = window.size - n_pos
    n_e = n_pos - n_neg
    if thresholds is None:
        return n_e
    dl_hat = n_pos * thresholds.tau_pos[y, x] - n_neg * thresholds.tau_neg[y, x]
    return n_e, dl_hat


def interval_counts(s: EventStream, frame_times: np.ndarray):
    """Per-interval per-pixel positive/negative counts over (t_j, t_{j+1}].

    Returns (n_pos, n_neg) with shape (len(frame_times) - 1, H, W).
    """
    frame_times = np.asarray(frame_times, dtype=np.float64)
    n_int = frame_times.size - 1
    interval = np.searchsorted(frame_times, s.t, side="left") - 1
    valid = (interval >= 0) & (interval < n_int)
    flat = interval[valid] * (s.height * s.width) \
        + s.y[valid].astype(np.int64) * s.width + s.x[valid]
    size = n_int * s.height * s.width
    pos = np.bincount(flat[s.polarity[valid] > 0], minlength=size)
    neg = np.bincount(flat[s.polarity[valid] < 0], minlength=size)
    shape = (n_int, s.height, s.width)
    return pos.reshape(shape), neg.reshape(shape)


def nearest_frame(t: float, frames) -> int:
    """Index of the frame whose timestamp is closest to t; ties go earlier."""
    times = np.array([f.t for f in frames], dtype=np.float64)
    if times.size == 0:
        raise ValueError("frame list is empty")
    i = int(np.searchsorted(times, t))
    if i == 0:
        return 0
    if i == times.size:
        return times.size - 1
    return i - 1 if t - times[i - 1] <= times[i] - t else i


# ---------------------------------------------------------------------------
# threshold estimation


def estimate_thresholds(frames: list[FrameRecord], s: EventStream,
                        default_tau: float = 0.1):
    """Per-pixel tau estimates from frame pairs and intermediate counts.

    For every consecutive frame pair: dL = ln I_{j+1} - ln I_j (floored
    luminance).  tau_pos(x,y) is the median over intervals with dL > 0 and
    n_pos > 0 of dL / n_pos (symmetrically for tau_neg); pixels with no usable
    interval fall back to default_tau.  Estimates are clamped to [1e-4, 2].

    Events whose polarity contradicts the interval trend are dropped from the
    returned stream when the interval is flagged as mismatched, i.e. when
    sign(n_e) != sign(dL) and |dL| > default_tau / 2.
    """
    if len(frames) < 2:
        raise ValueError("need at least 2 frames")
    height, width = frames[0].image.shape[:2]
    if len(s) == 0:
        return ThresholdMap.constant(default_tau, width, height), s

    times = np.array([f.t for f in frames])
    logs = np.stack([log_intensity(f.image) for f in frames])
    dl = np.diff(logs, axis=0)                      # (n_int, H, W)
    n_pos, n_neg = interval_counts(s, times)

    def median_ratio(delta, count):
        ratio = np.where(count > 0, delta / np.maximum(count, 1), np.nan)
        ratio[delta <= 0] = np.nan
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN pixels
            med = np.nanmedian(ratio, axis=0)
        med = np.where(np.isnan(med), default_tau, med)
        return np.clip(med, TAU_MIN, TAU_MAX)

    tau_pos = median_ratio(dl, n_pos)
    tau_neg = median_ratio(-dl, n_neg)
    tmap = ThresholdMap(tau_pos, tau_neg)

    # drop contradicting-polarity events inside mismatched intervals
    n_e = n_pos - n_neg
    mismatched = (np.sign(n_e) != np.sign(dl)) & (np.abs(dl) > default_tau / 2.0)
    if not np.any(mismatched):
        return tmap, s
    interval = np.searchsorted(times, s.t, side="left") - 1
    inside = (interval >= 0) & (interval < dl.shape[0])
    ival = np.clip(interval, 0, dl.shape[0] - 1)
    flagged = mismatched[ival, s.y, s.x] & inside
    trend = np.sign(dl[ival, s.y, s.x])
    drop = flagged & (s.polarity != trend)
    keep = ~drop
    filtered = EventStream(s.t[keep], s.x[keep], s.y[keep], s.polarity[keep],
                           s.width, s.height, presorted=True)
    return tmap, filtered


# ---------------------------------------------------------------------------
# void sampling


def sample_void(s: EventStream, frames, t: float, count: int,
                rng: np.random.Generator):
    """Pixels with no event since the last frame at or before t.

    Returns up to ``count`` (x, y, t) tuples drawn uniformly without
    replacement from the void pixels of the window (t_last_frame, t]; each
    stands for an effective event count of zero.
    """
    times = np.array([f.t for f in frames], dtype=np.float64)
    if t < times.min():
        raise ValueError("t precedes the first frame")
    t_last = times[times <= t].max()
    occupied = s.occupied_mask(t_last, t)
    void_flat = np.flatnonzero(~occupied.ravel())
    if void_flat.size == 0:
        return []
    take = min(count, void_flat.size)
    chosen = rng.choice(void_flat, size=take, replace=False)
    ys, xs = np.divmod(chosen, s.width)
    return [(int(x), int(y), float(t)) for x, y in zip(xs, ys)]


# ---------------------------------------------------------------------------
# "EVT1" file format: little-endian header (magic, u32 width, u32 height,
# u64 count) followed by 16-byte records {f64 t, u16 x, u16 y, i8 polarity,
# 3 zero pad bytes}, sorted like the in-memory stream.

_EVT_MAGIC = b"EVT1"


def save_events(path, s: EventStream) -> None:
    rec = np.zeros(len(s), dtype=_EVT_DTYPE)
    rec["t"] = s.t
    rec["x"] = s.x.astype(np.uint16)
    rec["y"] = s.y.astype(np.uint16)
    rec["p"] = s.polarity
    with open(path, "wb") as f:
        f.write(_EVT_MAGIC)
        f.write(struct.pack("<IIQ", s.width, s.height, len(s)))
        f.write(rec.tobytes())


def load_events(path) -> EventStream:
    with open(path, "rb") as f:
        if f.read(4) != _EVT_MAGIC:
            raise ValueError(f"{path}: not an EVT1 event file")
        width, height, count = struct.unpack("<IIQ", f.read(16))
        rec = np.frombuffer(f.read(int(count) * _EVT_DTYPE.itemsize), dtype=_EVT_DTYPE)
        if rec.size != count:
            raise ValueError(f"{path}: truncated event payload")
    return EventStream(rec["t"].copy(), rec["x"].astype(np.int32), rec["y"].astype(np.int32),
                       rec["p"].copy(), width, height, presorted=True)
