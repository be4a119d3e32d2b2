"""Loading and dumping structured-text documents (JSON, or YAML by extension)."""

from __future__ import annotations

import json
import os

import yaml

from .exceptions import ValidationError


def load_document(path) -> dict:
    path = os.fspath(path)
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        if path.endswith((".yaml", ".yml")):
            doc = yaml.safe_load(text)
        else:
            doc = json.loads(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ValidationError(f"{path}: not a valid document: {exc}") from None
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: top level must be a mapping")
    return doc


def dump_document(doc, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=False)
        fh.write("\n")
