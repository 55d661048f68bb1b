"""Location normalization against a Nominatim-compatible geocoder.

Locations are compared on canonical OpenStreetMap objects rather than on
their spelling. Lookups go through a persistent JSON cache and a 1 req/s
limiter; a miss falls back to the country and is flagged as unresolved.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

import httpx

from aee.llm import atomic_write_text

logger = logging.getLogger(__name__)

CACHE_FORMAT_VERSION = 1
DEFAULT_BASE_URL = "https://nominatim.openstreetmap.org"

# Nominatim address keys from most to least specific, with the level each maps to.
ADDRESS_LEVELS: tuple[tuple[str, str], ...] = (
    ("neighbourhood", "neighborhood"),
    ("quarter", "neighborhood"),
    ("suburb", "neighborhood"),
    ("city_district", "neighborhood"),
    ("hamlet", "city"),
    ("village", "city"),
    ("town", "city"),
    ("city", "city"),
    ("municipality", "city"),
    ("county", "county"),
    ("district", "district"),
    ("state_district", "district"),
    ("province", "region"),
    ("region", "region"),
    ("state", "region"),
    ("country", "country"),
)
RESOLUTION_LEVELS = ("country", "region", "county", "district", "city", "neighborhood")


class GeocoderError(RuntimeError):
    pass


@dataclass(frozen=True)
class NormalizedLocation:
    place_id: str
    display_hierarchy: tuple[str, ...]
    country: str
    resolution_level: str
    resolved: bool = True
    query_country: str = ""
    query_address: str = ""

    def __post_init__(self) -> None:
        if not self.display_hierarchy:
            raise ValueError("hierarchy must be non-empty")
        if self.resolution_level not in RESOLUTION_LEVELS:
            raise ValueError(f"unknown resolution level {self.resolution_level!r}")

    @property
    def key(self) -> str:
        """Equality key consistent with :func:`locations_match`."""
        if self.resolved:
            return self.place_id
        return f"unresolved:{self.query_country.casefold()}|{self.query_address.casefold()}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "place_id": self.place_id,
            "display_hierarchy": list(self.display_hierarchy),
            "country": self.country,
            "resolution_level": self.resolution_level,
            "resolved": self.resolved,
        }


def locations_match(a: NormalizedLocation, b: NormalizedLocation) -> bool:
    if a.resolved and b.resolved:
        return a.place_id == b.place_id
    return (
        a.query_country.casefold() == b.query_country.casefold()
        and a.query_address.casefold() == b.query_address.casefold()
    )


class RateLimiter:
    """At most one acquisition per ``interval`` seconds of the injected clock."""

    def __init__(
        self,
        interval: float = 1.0,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.interval = interval
        self._clock = clock
        self._sleep = sleep
        self._next = float("-inf")
        self._lock = threading.Lock()

    def acquire(self) -> None:
        with self._lock:
            now = self._clock()
            if now < self._next:
                self._sleep(self._next - now)
                now = self._clock()
            self._next = max(now, self._next) + self.interval


class GeoCache:
    """Versioned JSON file mapping normalized query strings to raw geocoder results."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.entries: dict[str, Any] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            data = json.loads(self.path.read_text("utf-8"))
            if data.get("version") != CACHE_FORMAT_VERSION:
                raise GeocoderError(f"unsupported geocode cache version {data.get('version')!r}")
            self.entries = dict(data.get("entries", {}))

    @property
    def version(self) -> int:
        return CACHE_FORMAT_VERSION

    def get(self, query: str) -> Any:
        with self._lock:
            return self.entries.get(query)

    def __contains__(self, query: str) -> bool:
        with self._lock:
            return query in self.entries

    def put(self, query: str, results: Any) -> None:
        with self._lock:
            self.entries[query] = results
            if self.path:
                payload = {"version": CACHE_FORMAT_VERSION, "entries": dict(sorted(self.entries.items()))}
                atomic_write_text(self.path, json.dumps(payload, ensure_ascii=False, indent=1))


def normalize_query(text: str) -> str:
    parts = [" ".join(p.split()) for p in text.split(",")]
    return ", ".join(p for p in parts if p).casefold()


class NominatimGeocoder:
    """Search-API client; one live request per second, results cached persistently."""

    def __init__(
        self,
        cache: GeoCache | None = None,
        *,
        base_url: str = DEFAULT_BASE_URL,
        user_agent: str | None = None,
        offline: bool = False,
        max_retries: int = 3,
        limiter: RateLimiter | None = None,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.cache = cache or GeoCache()
        self.base_url = base_url.rstrip("/")
        self.offline = offline
        self.max_retries = max_retries
        self.limiter = limiter or RateLimiter()
        self._sleep = sleep
        self._client = None
        self.live_requests = 0
        if not offline:
            if not user_agent:
                raise GeocoderError("a user-agent string is required for live geocoding")
            self._client = httpx.Client(
                headers={"User-Agent": user_agent}, timeout=30.0, transport=transport
            )

    def search(self, query: str) -> list[dict[str, Any]] | None:
        """Raw results for ``query``; ``None`` when offline and not cached."""
        key = normalize_query(query)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        if self.offline or self._client is None:
            return None
        params = {"q": query, "format": "jsonv2", "addressdetails": 1, "limit": 1}
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(2 ** (attempt - 1))
            self.limiter.acquire()
            self.live_requests += 1
            try:
                resp = self._client.get(f"{self.base_url}/search", params=params)
            except httpx.HTTPError as exc:
                last = exc
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = GeocoderError(f"status {resp.status_code}")
                continue
            resp.raise_for_status()
            results = resp.json()
            self.cache.put(key, results)
            return results
        raise GeocoderError(f"geocoder unreachable after {self.max_retries + 1} attempts: {last}")


def _hierarchy(result: Mapping[str, Any]) -> tuple[list[str], str]:
    address = result.get("address") or {}
    names: list[str] = []
    level = "country"
    for key, lvl in ADDRESS_LEVELS:
        value = address.get(key)
        if not value or (names and names[-1] == value):
            continue
        if not names:
            level = lvl
        names.append(value)
    if not names and result.get("name"):
        names = [result["name"]]
    return names, level


def _place_id(result: Mapping[str, Any]) -> str:
    if result.get("osm_type") and result.get("osm_id") is not None:
        return f"osm:{result['osm_type']}/{result['osm_id']}"
    if result.get("place_id") is not None:
        return f"nominatim:{result['place_id']}"
    raise GeocoderError("geocoder result has no identifier")


def _from_result(result: Mapping[str, Any], country: str, address: str, resolved: bool) -> NormalizedLocation:
    names, level = _hierarchy(result)
    found_country = (result.get("address") or {}).get("country") or country
    if not names or names[-1] != found_country:
        names.append(found_country)
    return NormalizedLocation(
        place_id=_place_id(result),
        display_hierarchy=tuple(names),
        country=found_country,
        resolution_level=level if resolved else "country",
        resolved=resolved,
        query_country=country,
        query_address=address,
    )


def _country_only(country: str, address: str) -> NormalizedLocation:
    return NormalizedLocation(
        place_id=f"country:{country.casefold()}",
        display_hierarchy=(country,),
        country=country,
        resolution_level="country",
        resolved=False,
        query_country=country,
        query_address=address,
    )


def normalize_location(loc: Mapping[str, str], geocoder: NominatimGeocoder) -> NormalizedLocation:
    """Resolve a ``{"country", "address"}`` value to the most specific matching place."""
    country = (loc.get("country") or "").strip()
    address = (loc.get("address") or "").strip()
    if not country and not address:
        raise ValueError("location has neither country nor address")
    if not country:
        raise ValueError("location country is empty")

    query = address or country
    if normalize_query(query).rsplit(", ", 1)[-1] != country.casefold():
        query = f"{query}, {country}"
    results = geocoder.search(query)
    if results:
        return _from_result(results[0], country, address, resolved=True)

    logger.info("no geocoder match for %r; falling back to country level", query)
    fallback = geocoder.search(country)
    if fallback:
        return _from_result(fallback[0], country, address, resolved=False)
    return _country_only(country, address)
