"""Abstractive event extraction toolkit."""

from aee.codebook import (
    Codebook,
    EventInstance,
    load_codebook,
    render_event_type_menu,
    render_signature_schema,
    validate_instance,
)

__all__ = [
    "Codebook",
    "EventInstance",
    "load_codebook",
    "render_event_type_menu",
    "render_signature_schema",
    "validate_instance",
]
__version__ = "0.1.0"
