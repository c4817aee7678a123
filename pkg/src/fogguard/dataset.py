"""VOC-style annotations, JSON manifests, hybrid datasets, splits and fog variants."""

from __future__ import annotations

import json
import os
import xml.etree.ElementTree as ET
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .errors import ClassListMismatch, DegenerateBox, ManifestError, MalformedXml, MissingDepth, UnknownClass
from .fogsynth import DEFAULT_AIRLIGHT, DEFAULT_DEPTH_MAX, FogParams, pseudo_depth, render_fog, rescale_depth
from .imagecore import DepthMap, Image, load_pfm, load_ppm, save_ppm
from .rng import SplitMix64

CLEAR = "clear"
REAL_FOG = "real_fog"
DOMAINS = (CLEAR, REAL_FOG)


@dataclass(frozen=True)
class GroundTruthBox:
    """Axis-aligned box in pixel corners (inclusive-exclusive)."""

    class_id: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DegenerateBox(f"degenerate box {self.corners}")

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass(frozen=True)
class Sample:
    image_path: Path
    boxes: tuple[GroundTruthBox, ...]
    domain_tag: str = CLEAR
    depth_path: Path | None = None
    annotation_path: Path | None = None

    def __post_init__(self):
        if self.domain_tag not in DOMAINS:
            raise ManifestError(f"unknown domain {self.domain_tag!r}")

    @property
    def image_id(self) -> str:
        return Path(self.image_path).stem


@dataclass(frozen=True)
class DatasetSpec:
    samples: tuple[Sample, ...]
    class_names: tuple[str, ...]

    def __post_init__(self):
        n = len(self.class_names)
        for s in self.samples:
            for b in s.boxes:
                if not 0 <= b.class_id < n:
                    raise UnknownClass(f"class id {b.class_id} out of range for {n} classes")

    def __len__(self):
        return len(self.samples)

    def by_domain(self, tag: str) -> "DatasetSpec":
        return DatasetSpec(tuple(s for s in self.samples if s.domain_tag == tag), self.class_names)


def _coord(bnd: ET.Element, tag: str) -> float:
    el = bnd.find(tag)
    if el is None or el.text is None:
        raise MalformedXml(f"bndbox is missing <{tag}>")
    try:
        return float(el.text.strip())
    except ValueError:
        raise MalformedXml(f"non-numeric <{tag}>: {el.text!r}") from None


def parse_voc_annotation(xml_text: str, class_names: Sequence[str]) -> list[GroundTruthBox]:
    """Boxes of a VOC annotation document.

    ``difficult`` flags are ignored. When the document carries ``<size>``,
    boxes must lie within ``[0, width] x [0, height]``.
    """
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from None
    index = {name: i for i, name in enumerate(class_names)}
    width = height = None
    size = root.find("size")
    if size is not None:
        try:
            width = float(size.findtext("width"))
            height = float(size.findtext("height"))
        except (TypeError, ValueError):
            raise MalformedXml("bad <size> element") from None
    boxes = []
    for obj in root.iter("object"):
        name = obj.findtext("name")
        if name is None:
            raise MalformedXml("<object> without <name>")
        name = name.strip()
        if name not in index:
            raise UnknownClass(f"unknown class {name!r}")
        bnd = obj.find("bndbox")
        if bnd is None:
            raise MalformedXml(f"object {name!r} has no <bndbox>")
        x0, y0, x1, y1 = (_coord(bnd, t) for t in ("xmin", "ymin", "xmax", "ymax"))
        if x0 >= x1 or y0 >= y1:
            raise DegenerateBox(f"object {name!r} has degenerate box ({x0}, {y0}, {x1}, {y1})")
        if width is not None and (x0 < 0 or y0 < 0 or x1 > width or y1 > height):
            raise DegenerateBox(f"object {name!r} box exceeds image bounds {width}x{height}")
        boxes.append(GroundTruthBox(index[name], x0, y0, x1, y1))
    return boxes


def voc_annotation_xml(boxes: Sequence[GroundTruthBox], class_names: Sequence[str],
                       width: int, height: int, filename: str = "") -> str:
    """Serialize boxes as a minimal VOC document (integer-valued coordinates are written as ints)."""

    def num(v: float) -> str:
        return str(int(v)) if float(v).is_integer() else repr(float(v))

    lines = ["<annotation>", f"  <filename>{filename}</filename>",
             f"  <size><width>{width}</width><height>{height}</height><depth>3</depth></size>"]
    for b in boxes:
        lines += [
            "  <object>",
            f"    <name>{class_names[b.class_id]}</name>",
            "    <difficult>0</difficult>",
            f"    <bndbox><xmin>{num(b.x_min)}</xmin><ymin>{num(b.y_min)}</ymin>"
            f"<xmax>{num(b.x_max)}</xmax><ymax>{num(b.y_max)}</ymax></bndbox>",
            "  </object>",
        ]
    lines.append("</annotation>")
    return "\n".join(lines) + "\n"


def load_manifest(path: str | os.PathLike) -> DatasetSpec:
    """Read ``{class_names, samples: [{image, depth?, annotation, domain}]}``.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: {exc}") from None
    if not isinstance(doc, dict) or set(doc) - {"class_names", "samples"}:
        raise ManifestError(f"{path}: manifest must have exactly class_names and samples")
    names = doc.get("class_names")
    entries = doc.get("samples")
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise ManifestError(f"{path}: class_names must be a list of strings")
    if not isinstance(entries, list):
        raise ManifestError(f"{path}: samples must be a list")
    base = path.parent
    samples = []
    for i, e in enumerate(entries):
        if not isinstance(e, dict) or "image" not in e or "annotation" not in e:
            raise ManifestError(f"{path}: sample {i} needs image and annotation")
        extra = set(e) - {"image", "depth", "annotation", "domain"}
        if extra:
            raise ManifestError(f"{path}: sample {i} has unknown keys {sorted(extra)}")
        ann = base / e["annotation"]
        try:
            boxes = parse_voc_annotation(ann.read_text(), names)
        except OSError as exc:
            raise ManifestError(f"{path}: sample {i}: {exc}") from None
        depth = base / e["depth"] if e.get("depth") else None
        samples.append(Sample(base / e["image"], tuple(boxes), e.get("domain", CLEAR), depth, ann))
    return DatasetSpec(tuple(samples), tuple(names))


def _rel(p: Path, base: Path) -> str:
    return Path(os.path.relpath(Path(p).resolve(), base.resolve())).as_posix()


def save_manifest(ds: DatasetSpec, path: str | os.PathLike) -> None:
    path = Path(path)
    base = path.parent
    entries = []
    for s in ds.samples:
        if s.annotation_path is None:
            raise ManifestError(f"sample {s.image_id} has no annotation file")
        e = {"image": _rel(s.image_path, base)}
        if s.depth_path is not None:
            e["depth"] = _rel(s.depth_path, base)
        e["annotation"] = _rel(s.annotation_path, base)
        e["domain"] = s.domain_tag
        entries.append(e)
    doc = {"class_names": list(ds.class_names), "samples": entries}
    path.write_text(json.dumps(doc, indent=2) + "\n")


def make_hybrid(clear: DatasetSpec, foggy: DatasetSpec) -> DatasetSpec:
    if tuple(clear.class_names) != tuple(foggy.class_names):
        raise ClassListMismatch(f"{list(clear.class_names)} != {list(foggy.class_names)}")
    return DatasetSpec(clear.samples + foggy.samples, clear.class_names)


def split_80_20(ds: DatasetSpec, rng: SplitMix64,
                mode: str = "with-replacement") -> tuple[DatasetSpec, DatasetSpec]:
    """Train/validation split of sizes ceil(0.8 n) and floor(0.2 n).

    ``with-replacement`` draws both parts independently with replacement, so
    they may overlap; ``without-replacement`` partitions a shuffle.
    """
    n = len(ds)
    if n < 1:
        raise ValueError("cannot split an empty dataset")
    n_train = (4 * n + 4) // 5
    n_val = n // 5
    if mode == "with-replacement":
        train = [ds.samples[rng.randbelow(n)] for _ in range(n_train)]
        val = [ds.samples[rng.randbelow(n)] for _ in range(n_val)]
    elif mode == "without-replacement":
        order = rng.shuffle(list(range(n)))
        train = [ds.samples[i] for i in order[:n_train]]
        val = [ds.samples[i] for i in order[n_train:]]
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    return DatasetSpec(tuple(train), ds.class_names), DatasetSpec(tuple(val), ds.class_names)


def sample_depth(sample: Sample, image: Image, depth_mode: str, d_max: float = DEFAULT_DEPTH_MAX) -> DepthMap:
    """Depth for fog rendering: the sample's PFM rescaled to ``d_max``, or pseudo-depth."""
    if depth_mode == "pseudo":
        return pseudo_depth(image.width, image.height)
    if depth_mode != "pfm":
        raise ValueError(f"unknown depth mode {depth_mode!r}")
    if sample.depth_path is None:
        raise MissingDepth(f"sample {sample.image_id} has no depth map")
    return rescale_depth(load_pfm(sample.depth_path), d_max)


def foggify_dataset(ds: DatasetSpec, betas: Sequence[float], out_dir: str | os.PathLike,
                    depth_mode: str = "pfm", airlight: float = DEFAULT_AIRLIGHT,
                    d_max: float = DEFAULT_DEPTH_MAX, jobs: int = 1) -> DatasetSpec:
    """Render each sample at its own fog density and write PPMs to ``out_dir``."""
    if len(betas) != len(ds):
        raise ValueError("need one beta per sample")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [f"{s.image_id}.ppm" for s in ds.samples]
    if len(set(names)) != len(names):
        raise ManifestError("duplicate image ids would collide in the output directory")
    if depth_mode == "pfm":
        missing = [s.image_id for s in ds.samples if s.depth_path is None]
        if missing:
            raise MissingDepth(f"samples without depth: {missing[:5]}")

    def work(i: int) -> Sample:
        s = ds.samples[i]
        img = load_ppm(s.image_path)
        d = sample_depth(s, img, depth_mode, d_max)
        out = out_dir / names[i]
        save_ppm(render_fog(img, d, FogParams(betas[i], airlight)), out)
        return replace(s, image_path=out)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            samples = list(pool.map(work, range(len(ds))))
    else:
        samples = [work(i) for i in range(len(ds))]
    return DatasetSpec(tuple(samples), ds.class_names)


def make_fog_variant(clear: DatasetSpec, beta: float, out_dir: str | os.PathLike,
                     depth_mode: str = "pfm", jobs: int = 1) -> DatasetSpec:
    """Fixed-density variant (e.g. 0.05 / 0.10 / 0.15 for low / medium / heavy)."""
    return foggify_dataset(clear, [beta] * len(clear), out_dir, depth_mode=depth_mode, jobs=jobs)
