"""Validate recorded API responses against the published JSON schemas."""
import json
import pathlib
import sys

import jsonschema

SCHEMAS = {
    "healthz": "health.schema.json",
    "volume_created": "volume_created.schema.json",
    "segment": "segment_response.schema.json",
    "request_segment": "segment_request.schema.json",
    "error_": "error.schema.json",
}


def schema_for(name):
    for prefix, schema in SCHEMAS.items():
        if name == prefix or (prefix.endswith("_") and name.startswith(prefix)):
            return schema
    return None


def main(schema_dir, sample_dir):
    schema_dir, sample_dir = pathlib.Path(schema_dir), pathlib.Path(sample_dir)
    samples = sorted(sample_dir.glob("*.json"))
    if not samples:
        print(f"no samples in {sample_dir}")
        return 1
    seen, failures = set(), 0
    for sample in samples:
        schema_name = schema_for(sample.stem)
        if schema_name is None:
            print(f"FAIL {sample.name}: no schema")
            failures += 1
            continue
        schema = json.loads((schema_dir / schema_name).read_text())
        jsonschema.Draft202012Validator.check_schema(schema)
        try:
            jsonschema.validate(json.loads(sample.read_text()), schema, cls=jsonschema.Draft202012Validator)
            print(f"ok   {sample.name} ({schema_name})")
            seen.add(schema_name)
        except jsonschema.ValidationError as e:
            print(f"FAIL {sample.name}: {e.message}")
            failures += 1
    missing = set(SCHEMAS.values()) - seen
    for m in sorted(missing):
        print(f"FAIL no sample exercised {m}")
    return 1 if failures or missing else 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1], sys.argv[2]))
