"""On-disk dataset layout: ``volumes/<id>.json|.raw`` plus one ``annotations.csv``."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from ..data.volume import (Annotation, Volume, VolumeFormatError, read_annotations, read_volume,
                           write_annotations, write_volume)

Item = Tuple[Volume, List[Annotation]]


def write_dataset(items: Sequence[Item], directory) -> Path:
    directory = Path(directory)
    vdir = directory / "volumes"
    for vol, _ in items:
        write_volume(vol, vdir)
    write_annotations(directory / "annotations.csv", [a for _, anns in items for a in anns])
    return directory


def dataset_ids(directory) -> List[str]:
    vdir = Path(directory) / "volumes"
    if not vdir.is_dir():
        raise VolumeFormatError(f"{directory}: no volumes/ directory")
    return sorted(p.stem for p in vdir.glob("*.json"))


def load_dataset(directory, ids: Optional[Sequence[str]] = None) -> List[Item]:
    """Volumes (sorted by id, or in ``ids`` order) with their annotations."""
    directory = Path(directory)
    ann_path = directory / "annotations.csv"
    by_id: Dict[str, List[Annotation]] = defaultdict(list)
    if ann_path.exists():
        for a in read_annotations(ann_path):
            by_id[a.volume_id].append(a)
    wanted = dataset_ids(directory) if ids is None else list(ids)
    return [(read_volume(directory / "volumes" / f"{i}.json"), by_id.get(i, [])) for i in wanted]
