from __future__ import annotations

import json

import httpx
import pytest

from aee.geonorm import (
    GeoCache,
    GeocoderError,
    NominatimGeocoder,
    RateLimiter,
    locations_match,
    normalize_location,
    normalize_query,
)


class FakeClock:
    def __init__(self):
        self.now = 0.0
        self.stamps = []

    def time(self):
        return self.now

    def sleep(self, s):
        self.now += s


@pytest.fixture
def offline(data_dir):
    return NominatimGeocoder(GeoCache(data_dir / "geocode_fixture.json"), offline=True)


def test_mand_tehsil_hierarchy(offline):
    loc = normalize_location({"country": "Pakistan", "address": "Mand Tehsil, Kech District, Balochistan, Pakistan"}, offline)
    assert loc.display_hierarchy == ("Mand Tehsil", "Kech District", "Balochistan", "Pakistan")
    assert loc.resolved and loc.country == "Pakistan" and loc.resolution_level == "county"
    assert loc.display_hierarchy[-1] == loc.country


def test_country_only(offline):
    loc = normalize_location({"country": "Iraq", "address": "Iraq"}, offline)
    assert loc.resolution_level == "country" and loc.display_hierarchy == ("Iraq",)


def test_nonsense_address_falls_back(offline):
    loc = normalize_location({"country": "Iraq", "address": "Zzqx, Nowhere"}, offline)
    assert not loc.resolved
    assert loc.country == "Iraq" and loc.resolution_level == "country"


def test_unknown_country_without_cache(offline):
    loc = normalize_location({"country": "Atlantis", "address": "Harbour"}, offline)
    assert not loc.resolved and loc.place_id == "country:atlantis"


def test_empty_inputs(offline):
    with pytest.raises(ValueError):
        normalize_location({"country": "", "address": ""}, offline)
    with pytest.raises(ValueError):
        normalize_location({"country": " ", "address": "Mosul"}, offline)


def test_spelling_variants_match(offline):
    a = normalize_location({"country": "Iraq", "address": "Mosul - Old City"}, offline)
    b = normalize_location({"country": "Iraq", "address": "Mosul, Old City"}, offline)
    c = normalize_location({"country": "Iraq", "address": "Baghdad, Iraq"}, offline)
    assert a.resolved and locations_match(a, b) and locations_match(b, a)
    assert not locations_match(a, c)
    assert locations_match(c, c)
    m1 = normalize_location({"country": "Pakistan", "address": "Mand, Kech, Balochistan, Pakistan"}, offline)
    m2 = normalize_location({"country": "Pakistan", "address": "Mand Tehsil, Kech District, Balochistan, Pakistan"}, offline)
    assert m1.place_id == m2.place_id


def test_unresolved_match_uses_strings(offline):
    a = normalize_location({"country": "Iraq", "address": "Zzqx, Nowhere"}, offline)
    b = normalize_location({"country": "IRAQ", "address": "zzqx, nowhere"}, offline)
    c = normalize_location({"country": "Iraq", "address": "Qqq"}, offline)
    assert locations_match(a, b) and not locations_match(a, c)
    assert a.key == b.key != c.key


def test_normalize_query():
    assert normalize_query("  Mosul ,  Old   City,Iraq ") == "mosul, old city, iraq"


def test_rate_limiter_with_injected_clock():
    clock = FakeClock()
    lim = RateLimiter(1.0, clock=clock.time, sleep=clock.sleep)
    for _ in range(10):
        lim.acquire()
        clock.stamps.append(clock.now)
    gaps = [b - a for a, b in zip(clock.stamps, clock.stamps[1:])]
    assert all(g >= 1.0 - 1e-12 for g in gaps)
    assert clock.stamps[-1] == pytest.approx(9.0)


def test_live_lookup_is_cached_and_rate_limited(tmp_path):
    clock = FakeClock()
    calls = []

    def handler(request: httpx.Request):
        calls.append((clock.now, dict(request.url.params), request.headers["user-agent"]))
        return httpx.Response(200, json=[{"osm_type": "relation", "osm_id": 1, "address": {"city": "Mosul", "country": "Iraq"}}])

    cache = GeoCache(tmp_path / "geo.json")
    geo = NominatimGeocoder(
        cache, user_agent="aee-tests", transport=httpx.MockTransport(handler),
        limiter=RateLimiter(1.0, clock=clock.time, sleep=clock.sleep),
    )
    a = normalize_location({"country": "Iraq", "address": "Mosul"}, geo)
    normalize_location({"country": "Iraq", "address": "Mosul"}, geo)
    normalize_location({"country": "Iraq", "address": "Erbil"}, geo)
    assert a.place_id == "osm:relation/1"
    assert len(calls) == 2
    assert calls[0][1]["q"] == "Mosul, Iraq" and calls[0][1]["format"] == "jsonv2"
    assert calls[0][2] == "aee-tests"
    assert calls[1][0] - calls[0][0] >= 1.0
    saved = json.loads((tmp_path / "geo.json").read_text())
    assert saved["version"] == 1 and "mosul, iraq" in saved["entries"]


def test_live_requires_user_agent():
    with pytest.raises(GeocoderError):
        NominatimGeocoder(GeoCache())


def test_service_unreachable(tmp_path):
    geo = NominatimGeocoder(
        GeoCache(), user_agent="t", max_retries=2, sleep=lambda s: None,
        transport=httpx.MockTransport(lambda r: httpx.Response(503)),
        limiter=RateLimiter(0.0),
    )
    with pytest.raises(GeocoderError):
        normalize_location({"country": "Iraq", "address": "Mosul"}, geo)


def test_bad_cache_version(tmp_path):
    p = tmp_path / "g.json"
    p.write_text(json.dumps({"version": 99, "entries": {}}))
    with pytest.raises(GeocoderError):
        GeoCache(p)


def test_deterministic_given_cache(offline, data_dir):
    again = NominatimGeocoder(GeoCache(data_dir / "geocode_fixture.json"), offline=True)
    for loc in ({"country": "Iraq", "address": "Mosul, Nineveh, Iraq"}, {"country": "Iraq", "address": "Zzqx"}):
        assert normalize_location(loc, offline) == normalize_location(loc, again)
