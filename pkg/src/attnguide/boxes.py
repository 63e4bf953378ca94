"""Bounding-box trajectory priors: parsing, validation, resampling, masks.

The text format is the LLM box-generator output: per-frame lines
``Frame k: [{'id': 0, 'name': ..., 'box': [x, y, w, h]}, ...]`` followed by
a ``Background keyword:`` line.  Coordinates are pixels of a 576x320 frame
(x rightward, y downward); boxes are stored as [x, y, w, h].
"""

from __future__ import annotations

import ast
import json
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import BoxParseError, InputError

DEFAULT_FRAME_W = 576
DEFAULT_FRAME_H = 320

OUT_OF_FRAME = "OUT_OF_FRAME"
VELOCITY = "VELOCITY"
DEGENERATE = "DEGENERATE"


@dataclass
class BoxTrajectory:
    subject_id: int
    name: str
    boxes: list  # per-frame [x, y, w, h]


@dataclass
class SpatialPriorSet:
    frame_width_px: int = DEFAULT_FRAME_W
    frame_height_px: int = DEFAULT_FRAME_H
    frame_count: int = 0
    trajectories: list = field(default_factory=list)
    background_keyword: str = ""
    load_warnings: list = field(default_factory=list)

    def trajectory_by_id(self, subject_id):
        for traj in self.trajectories:
            if traj.subject_id == subject_id:
                return traj
        raise KeyError(subject_id)


@dataclass
class Violation:
    kind: str
    subject_id: int
    frame: int
    message: str


@dataclass
class MaskSet:
    grid_h: int
    grid_w: int
    masks: dict  # (key, frame) -> binary np.ndarray [grid_h, grid_w]
    warnings: list = field(default_factory=list)

    def mask(self, key, frame):
        return self.masks[(key, frame)]

    def rebind(self, id_to_key):
        """Re-key masks, e.g. from subject id to prompt token index."""
        remapped = {
            (id_to_key[k], f): m for (k, f), m in self.masks.items() if k in id_to_key
        }
        return MaskSet(self.grid_h, self.grid_w, remapped, list(self.warnings))


_FRAME_RE = re.compile(r"^Frame\s+(\d+)\s*:\s*(\[.*\])\s*$")
_BACKGROUND_RE = re.compile(r"^Background keyword\s*:\s*(.+?)\s*$")


def _check_record(rec, line_no):
    if not isinstance(rec, dict) or set(rec) != {"id", "name", "box"}:
        raise BoxParseError(f"record must have keys id/name/box, got {rec!r}", line_no)
    if not isinstance(rec["id"], int):
        raise BoxParseError(f"id must be an integer, got {rec['id']!r}", line_no)
    if not isinstance(rec["name"], str):
        raise BoxParseError(f"name must be a string, got {rec['name']!r}", line_no)
    box = rec["box"]
    if not (isinstance(box, list) and len(box) == 4 and all(isinstance(v, int) for v in box)):
        raise BoxParseError(f"box must be four integers, got {box!r}", line_no)


def _clip_boxes(prior):
    W, H = prior.frame_width_px, prior.frame_height_px
    for traj in prior.trajectories:
        for f, (x, y, w, h) in enumerate(traj.boxes):
            x2, y2 = min(max(x + w, 0), W), min(max(y + h, 0), H)
            xc, yc = min(max(x, 0), W), min(max(y, 0), H)
            clipped = [xc, yc, x2 - xc, y2 - yc]
            if clipped != [x, y, w, h]:
                prior.load_warnings.append(
                    f"clipped box of subject {traj.subject_id} frame {f}: "
                    f"{[x, y, w, h]} -> {clipped}"
                )
                traj.boxes[f] = clipped


def parse_llm_boxes(text, frame_width_px=DEFAULT_FRAME_W, frame_height_px=DEFAULT_FRAME_H):
    """Parse the box-generator text format into a SpatialPriorSet."""
    frames, background = {}, None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(("Reasoning:", "Caption:")):
            continue
        m = _BACKGROUND_RE.match(line)
        if m:
            background = m.group(1)
            continue
        m = _FRAME_RE.match(line)
        if m is None:
            raise BoxParseError(f"unrecognized line: {line!r}", line_no)
        k = int(m.group(1))
        if k in frames:
            raise BoxParseError(f"duplicate frame index {k}", line_no)
        try:
            records = ast.literal_eval(m.group(2))
        except (ValueError, SyntaxError) as exc:
            raise BoxParseError(f"malformed record literal: {exc}", line_no) from exc
        if not isinstance(records, list):
            raise BoxParseError("frame payload must be a list", line_no)
        seen_ids = set()
        for rec in records:
            _check_record(rec, line_no)
            if rec["id"] in seen_ids:
                raise BoxParseError(f"duplicate id {rec['id']} within frame {k}", line_no)
            seen_ids.add(rec["id"])
        frames[k] = records

    if not frames:
        raise BoxParseError("no 'Frame k:' lines found")
    if background is None:
        raise BoxParseError("missing 'Background keyword:' line")
    expected = list(range(1, len(frames) + 1))
    if sorted(frames) != expected:
        raise BoxParseError(f"frame indices {sorted(frames)} are not consecutive from 1")

    ids = []
    for k in expected:
        for rec in frames[k]:
            if rec["id"] not in ids:
                ids.append(rec["id"])
    trajectories = []
    for sid in ids:
        boxes, name = [], None
        for k in expected:
            recs = [r for r in frames[k] if r["id"] == sid]
            if not recs:
                raise BoxParseError(f"subject id {sid} missing from frame {k}")
            if name is None:
                name = recs[0]["name"]
            boxes.append(list(recs[0]["box"]))
        trajectories.append(BoxTrajectory(sid, name, boxes))

    prior = SpatialPriorSet(
        frame_width_px=frame_width_px,
        frame_height_px=frame_height_px,
        frame_count=len(expected),
        trajectories=trajectories,
        background_keyword=background,
    )
    _clip_boxes(prior)
    return prior


def serialize_boxes(prior):
    """Inverse of parse_llm_boxes (round-trips losslessly)."""
    lines = []
    for f in range(prior.frame_count):
        recs = ", ".join(
            "{'id': %d, 'name': '%s', 'box': %s}" % (t.subject_id, t.name, t.boxes[f])
            for t in prior.trajectories
        )
        lines.append(f"Frame {f + 1}: [{recs}]")
    lines.append(f"Background keyword: {prior.background_keyword}")
    return "\n".join(lines) + "\n"


def load_structured_boxes(text):
    """Parse the equivalent JSON form: frame_size, frames, background."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise BoxParseError(f"invalid JSON: {exc}", exc.lineno) from exc
    try:
        W, H = obj["frame_size"]
        frames = obj["frames"]
        background = obj["background"]
    except (KeyError, ValueError) as exc:
        raise BoxParseError(f"missing structured field: {exc}") from exc
    lines = [
        "Frame %d: [%s]" % (
            k + 1,
            ", ".join(
                "{'id': %d, 'name': '%s', 'box': %s}"
                % (r["id"], r["name"], [int(v) for v in r["box"]])
                for r in recs
            ),
        )
        for k, recs in enumerate(frames)
    ]
    lines.append(f"Background keyword: {background}")
    return parse_llm_boxes("\n".join(lines), int(W), int(H))


def detect_and_parse(text):
    """Accept either the text format or the structured JSON form."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return load_structured_boxes(text)
    return parse_llm_boxes(text)


def validate_trajectories(prior, max_step_px=60, allow_offscreen=False):
    """Diagnostic pass: out-of-frame, velocity, and degenerate-box checks."""
    violations = []
    W, H = prior.frame_width_px, prior.frame_height_px
    for traj in prior.trajectories:
        prev_center = None
        for f, (x, y, w, h) in enumerate(traj.boxes):
            if not allow_offscreen and (x < 0 or y < 0 or x + w > W or y + h > H):
                violations.append(Violation(
                    OUT_OF_FRAME, traj.subject_id, f,
                    f"box {[x, y, w, h]} exceeds {W}x{H} frame",
                ))
            if w == 0 or h == 0:
                violations.append(Violation(
                    DEGENERATE, traj.subject_id, f, f"box {[x, y, w, h]} has zero area",
                ))
            center = (x + w / 2.0, y + h / 2.0)
            if prev_center is not None:
                step = float(np.hypot(center[0] - prev_center[0], center[1] - prev_center[1]))
                if step > max_step_px:
                    violations.append(Violation(
                        VELOCITY, traj.subject_id, f,
                        f"center moved {step:.1f}px between frames {f} and {f + 1} "
                        f"(limit {max_step_px})",
                    ))
            prev_center = center
    return violations


def resample_frames(prior, target_F):
    """Linear per-corner interpolation of trajectories onto target_F frames."""
    if prior.frame_count < 2:
        raise InputError("resampling needs at least 2 source frames")
    if target_F < 2:
        raise InputError("target frame count must be at least 2")
    src = np.arange(prior.frame_count) / (prior.frame_count - 1)
    dst = np.arange(target_F) / (target_F - 1)
    out_trajs = []
    for traj in prior.trajectories:
        b = np.asarray(traj.boxes, dtype=np.float64)
        corners = np.stack([b[:, 0], b[:, 1], b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]], axis=1)
        interp = np.stack([np.interp(dst, src, corners[:, c]) for c in range(4)], axis=1)
        rounded = np.rint(interp).astype(int)
        boxes = [
            [int(x1), int(y1), int(x2 - x1), int(y2 - y1)]
            for x1, y1, x2, y2 in rounded
        ]
        out_trajs.append(BoxTrajectory(traj.subject_id, traj.name, boxes))
    return SpatialPriorSet(
        frame_width_px=prior.frame_width_px,
        frame_height_px=prior.frame_height_px,
        frame_count=target_F,
        trajectories=out_trajs,
        background_keyword=prior.background_keyword,
    )


def rasterize_masks(prior, grid_h, grid_w):
    """Binary masks at attention resolution via cell-center-in-box sampling.

    A cell is inside when its center lies in the half-open interval
    [x, x+w) x [y, y+h), which keeps adjacent boxes from double-covering
    shared edges.
    """
    if grid_h < 1 or grid_w < 1:
        raise InputError("grid dimensions must be >= 1")
    W, H = prior.frame_width_px, prior.frame_height_px
    cx = (np.arange(grid_w) + 0.5) * (W / grid_w)
    cy = (np.arange(grid_h) + 0.5) * (H / grid_h)
    masks, warnings = {}, []
    for traj in prior.trajectories:
        for f, (x, y, w, h) in enumerate(traj.boxes):
            inside_x = (cx >= x) & (cx < x + w)
            inside_y = (cy >= y) & (cy < y + h)
            mask = (inside_y[:, None] & inside_x[None, :]).astype(np.float64)
            if not mask.any():
                warnings.append(
                    f"all-zero mask for subject {traj.subject_id} frame {f} "
                    f"(box {[x, y, w, h]} at {grid_h}x{grid_w})"
                )
            masks[(traj.subject_id, f)] = mask
    return MaskSet(grid_h, grid_w, masks, warnings)
