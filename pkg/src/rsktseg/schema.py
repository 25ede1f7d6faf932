"""Validation of emitted JSON against the schemas shipped in ``rsktseg/schemas``."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import jsonschema


def _inline_refs(node):
    if isinstance(node, dict):
        if set(node) == {"$ref"} and node["$ref"].endswith(".json"):
            return load_schema(node["$ref"][: -len(".json")])
        return {k: _inline_refs(v) for k, v in node.items()}
    if isinstance(node, list):
        return [_inline_refs(v) for v in node]
    return node


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    text = resources.files("rsktseg.schemas").joinpath(f"{name}.json").read_text()
    return _inline_refs(json.loads(text))


def validate(doc: dict, name: str) -> dict:
    jsonschema.validate(doc, load_schema(name))
    return doc
