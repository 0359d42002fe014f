"""On-disk formats: scenes, detections, tubes, evaluation reports, charts and run manifests."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import platform
import sys
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import Tubelet
from .simulator import GroundTruthTube, Scene, SceneSpec

SCENES_FORMAT = "stepdet-scenes"
SCENES_VERSION = 1


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to a temp file beside ``path`` and rename it into place."""
    atomic_write_bytes(path, text.encode("utf-8"))


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        # mkstemp creates 0600; give the file ordinary permissions
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in records)


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# scenes


def scene_to_dict(scene: Scene) -> dict:
    return {
        "name": scene.name,
        "width": scene.width,
        "height": scene.height,
        "n_frames": scene.n_frames,
        "n_classes": scene.n_classes,
        "tubes": [
            {"label": t.label, "start_frame": t.start_frame, "boxes": t.boxes.tolist(), "motion": t.motion}
            for t in scene.tubes
        ],
    }


def scene_from_dict(d: dict) -> Scene:
    tubes = [GroundTruthTube(t["label"], t["start_frame"], t["boxes"], t.get("motion", {})) for t in d["tubes"]]
    return Scene(d["name"], float(d["width"]), float(d["height"]), int(d["n_frames"]), int(d["n_classes"]), tubes)


def save_scenes(path, scenes: Sequence[Scene], spec: SceneSpec | None = None) -> None:
    doc = {
        "format": SCENES_FORMAT,
        "version": SCENES_VERSION,
        "spec": None if spec is None else asdict(spec),
        "scenes": [scene_to_dict(s) for s in scenes],
    }
    atomic_write_text(path, json.dumps(doc, indent=1) + "\n")


def load_scenes(path) -> list[Scene]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != SCENES_FORMAT:
        raise ValueError(f"{path}: not a scene file")
    if doc.get("version") != SCENES_VERSION:
        raise ValueError(f"{path}: unsupported scene file version {doc.get('version')}")
    return [scene_from_dict(d) for d in doc["scenes"]]


# ---------------------------------------------------------------------------
# detections


@dataclass
class DetectionRecord:
    """One proposal's output at one step; padding frames are not stored."""

    video: str
    clip: int
    proposal_id: int
    step: int
    probs: np.ndarray
    tubelet: Tubelet

    def to_dict(self) -> dict:
        t = self.tubelet
        frames = [
            {"frame": int(f), "x1": float(b[0]), "y1": float(b[1]), "x2": float(b[2]), "y2": float(b[3])}
            for f, b, pad in zip(t.frames, t.boxes, t.padding)
            if not pad
        ]
        return {
            "video": self.video,
            "clip": self.clip,
            "proposal_id": self.proposal_id,
            "probs": [float(p) for p in self.probs],
            "tubelet": frames,
            "step": self.step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionRecord":
        rows = d["tubelet"]
        if not rows:
            raise ValueError("detection record without frames")
        frames = [int(r["frame"]) for r in rows]
        if frames != list(range(frames[0], frames[0] + len(frames))):
            raise ValueError("detection frames must be contiguous")
        boxes = np.array([[r["x1"], r["y1"], r["x2"], r["y2"]] for r in rows], dtype=np.float64)
        return cls(d["video"], int(d["clip"]), int(d["proposal_id"]), int(d["step"]),
                   np.asarray(d["probs"], dtype=np.float64), Tubelet(frames[0], boxes))


def save_detections(path, records: Iterable[DetectionRecord]) -> None:
    atomic_write_text(path, _jsonl(r.to_dict() for r in records))


def load_detections(path) -> list[DetectionRecord]:
    return [DetectionRecord.from_dict(d) for d in read_jsonl(path)]


# ---------------------------------------------------------------------------
# tubes


def tube_record(video: str, label: int, score: float, start_frame: int, boxes: np.ndarray) -> dict:
    return {
        "video": video,
        "class": int(label),
        "score": float(score),
        "frames": [
            {"frame": start_frame + i, "x1": float(b[0]), "y1": float(b[1]), "x2": float(b[2]), "y2": float(b[3])}
            for i, b in enumerate(boxes)
        ],
    }


def save_tubes(path, records: Iterable[dict]) -> None:
    atomic_write_text(path, _jsonl(records))


def parse_tube(d: dict) -> tuple[str, int, float, int, np.ndarray]:
    rows = d["frames"]
    boxes = np.array([[r["x1"], r["y1"], r["x2"], r["y2"]] for r in rows], dtype=np.float64).reshape(-1, 4)
    start = int(rows[0]["frame"]) if rows else 0
    return d["video"], int(d["class"]), float(d["score"]), start, boxes


# ---------------------------------------------------------------------------
# tables and charts


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    atomic_write_text(path, csv_text(header, rows))


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _svg(fig) -> bytes:
    import matplotlib.pyplot as plt

    buf = io.BytesIO()
    # fixed metadata keeps the file byte-stable across runs
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return buf.getvalue()


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "stepdet"
    return plt.subplots(figsize=(6, 4))


def line_chart_svg(path, x: Sequence[float], series: dict[str, Sequence[float]], xlabel: str, ylabel: str, title: str = "") -> None:
    fig, ax = _figure()
    for name, ys in series.items():
        ax.plot(x, ys, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    atomic_write_bytes(path, _svg(fig))


def bar_chart_svg(path, edges: Sequence[float], counts_by_series: dict[str, Sequence[float]], xlabel: str, ylabel: str, title: str = "") -> None:
    fig, ax = _figure()
    edges = np.asarray(edges, dtype=np.float64)
    n = max(len(counts_by_series), 1)
    width = (edges[1] - edges[0]) / (n + 1) if len(edges) > 1 else 0.8
    for i, (name, counts) in enumerate(counts_by_series.items()):
        ax.bar(edges[:-1] + (i + 0.5) * width, counts, width=width, label=name, align="edge")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(counts_by_series) > 1:
        ax.legend()
    atomic_write_bytes(path, _svg(fig))


# ---------------------------------------------------------------------------
# manifests


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict:
    import numpy

    from . import __version__

    return {"stepdet": __version__, "python": platform.python_version(), "numpy": numpy.__version__}


def write_manifest(path, command: str, config: dict, seed: int, outputs: Sequence, inputs: Sequence = ()) -> dict:
    """Record what produced a run's artifacts so it can be replayed exactly."""
    manifest = {
        "command": command,
        "config_hash": config_hash(config),
        "config": config,
        "seed": seed,
        "versions": versions(),
        "argv": sys.argv[1:],
        "inputs": {str(p): file_digest(p) for p in inputs},
        "outputs": {str(Path(p).name): file_digest(p) for p in outputs},
    }
    write_json(path, manifest)
    return manifest
