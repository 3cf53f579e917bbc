"""Power plant site catalog: records, class vocabulary, CSV loading.

The catalog CSV has columns ``site_id,latitude,longitude,plant_class,
cooling_class`` (UTF-8, cooling may be empty). Plant and cooling class
strings are accepted either as the canonical short names used throughout
this package or as the long-form registry nomenclature they were sourced
from (e.g. "Fossil Brown coal/Lignite").
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path

from .errors import CatalogError


class PlantClass(enum.Enum):
    BROWN_COAL = "BrownCoal"
    GAS = "Gas"
    HARD_COAL = "HardCoal"
    OIL = "Oil"
    HYDRO_PUMPED_STORAGE = "HydroPumpedStorage"
    HYDRO_RUN_OF_RIVER = "HydroRunOfRiver"
    HYDRO_RESERVOIR = "HydroReservoir"
    NUCLEAR = "Nuclear"
    SOLAR = "Solar"
    WIND_ONSHORE = "WindOnshore"


class CoolingClass(enum.Enum):
    AIR_COOLING = "AirCooling"
    MECHANICAL_DRAFT_TOWER = "MechanicalDraftTower"
    NATURAL_DRAFT_TOWER = "NaturalDraftTower"
    ONCE_THROUGH = "OnceThrough"


#: Plant classes that generate power from steam and therefore need cooling.
THERMAL_CLASSES = frozenset({
    PlantClass.BROWN_COAL,
    PlantClass.GAS,
    PlantClass.HARD_COAL,
    PlantClass.OIL,
    PlantClass.NUCLEAR,
})

_PLANT_ALIASES = {
    "fossil brown coal/lignite": PlantClass.BROWN_COAL,
    "fossil gas": PlantClass.GAS,
    "fossil hard coal": PlantClass.HARD_COAL,
    "fossil oil": PlantClass.OIL,
    "hydro pumped storage": PlantClass.HYDRO_PUMPED_STORAGE,
    "hydro run-of-river and poundage": PlantClass.HYDRO_RUN_OF_RIVER,
    "hydro water reservoir": PlantClass.HYDRO_RESERVOIR,
    "nuclear": PlantClass.NUCLEAR,
    "solar": PlantClass.SOLAR,
    "wind onshore": PlantClass.WIND_ONSHORE,
}
_PLANT_ALIASES.update({m.value.lower(): m for m in PlantClass})

_COOLING_ALIASES = {
    "air cooling": CoolingClass.AIR_COOLING,
    "mechanical draft tower": CoolingClass.MECHANICAL_DRAFT_TOWER,
    "natural draft tower": CoolingClass.NATURAL_DRAFT_TOWER,
    "once-through": CoolingClass.ONCE_THROUGH,
    "once-through cooling": CoolingClass.ONCE_THROUGH,
    "once through": CoolingClass.ONCE_THROUGH,
}
_COOLING_ALIASES.update({m.value.lower(): m for m in CoolingClass})

_REQUIRED_COLUMNS = ("site_id", "latitude", "longitude", "plant_class", "cooling_class")


@dataclass(frozen=True)
class SiteRecord:
    """One power plant site with geolocation and class labels."""

    site_id: str
    latitude: float
    longitude: float
    plant_class: PlantClass
    cooling_class: CoolingClass | None = None

    def __post_init__(self):
        if not self.site_id:
            raise ValueError("site_id must be nonempty")
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude {self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"longitude {self.longitude} outside [-180, 180]")
        if self.cooling_class is not None and not self.is_thermal:
            raise ValueError(
                f"non-thermal plant {self.plant_class.value} cannot carry a cooling class"
            )

    @property
    def is_thermal(self) -> bool:
        return self.plant_class in THERMAL_CLASSES


def parse_plant_class(text: str) -> PlantClass:
    key = text.strip().lower()
    if key not in _PLANT_ALIASES:
        raise ValueError(f"unknown plant class: {text!r}")
    return _PLANT_ALIASES[key]


def parse_cooling_class(text: str) -> CoolingClass | None:
    key = text.strip().lower()
    if not key:
        return None
    if key not in _COOLING_ALIASES:
        raise ValueError(f"unknown cooling class: {text!r}")
    return _COOLING_ALIASES[key]


def load_catalog(path: str | Path) -> list[SiteRecord]:
    """Load and validate a site catalog CSV.

    All rows are checked; failures are collected and raised together so a
    bad catalog is reported in one pass, each message carrying its row
    number and offending field.
    """
    path = Path(path)
    if not path.is_file():
        raise CatalogError(f"catalog file not found: {path}")

    records: list[SiteRecord] = []
    problems: list[str] = []
    seen_ids: set[str] = set()

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in _REQUIRED_COLUMNS if c not in header]
        if missing:
            raise CatalogError(f"catalog missing column(s): {', '.join(missing)}")
        for row_num, row in enumerate(reader, start=2):  # row 1 is the header
            try:
                records.append(_parse_row(row, seen_ids))
            except ValueError as exc:
                problems.append(f"row {row_num}: {exc}")

    if problems:
        raise CatalogError(
            f"{len(problems)} invalid catalog row(s):\n" + "\n".join(problems)
        )
    return records


def _parse_row(row: dict, seen_ids: set[str]) -> SiteRecord:
    site_id = (row.get("site_id") or "").strip()
    if not site_id:
        raise ValueError("field site_id: empty")
    if site_id in seen_ids:
        raise ValueError(f"field site_id: duplicate {site_id!r}")

    def _float(field: str) -> float:
        raw = (row.get(field) or "").strip()
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"field {field}: not a number: {raw!r}") from None

    latitude = _float("latitude")
    longitude = _float("longitude")
    try:
        plant = parse_plant_class(row.get("plant_class") or "")
    except ValueError as exc:
        raise ValueError(f"field plant_class: {exc}") from None
    try:
        cooling = parse_cooling_class(row.get("cooling_class") or "")
    except ValueError as exc:
        raise ValueError(f"field cooling_class: {exc}") from None

    try:
        record = SiteRecord(site_id, latitude, longitude, plant, cooling)
    except ValueError as exc:
        raise ValueError(str(exc)) from None
    seen_ids.add(site_id)
    return record


def cooling_sites(records: list[SiteRecord]) -> list[SiteRecord]:
    """Thermal sites that carry a cooling class (the cooling-task subset)."""
    return [r for r in records if r.is_thermal and r.cooling_class is not None]
