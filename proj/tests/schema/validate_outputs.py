"""Runs the partvit CLI end to end on a tiny dataset and validates every
machine-readable output against the JSON schemas."""
import csv
import json
import pathlib
import subprocess
import sys
import tempfile

import jsonschema
from referencing import Registry, Resource


def load_schemas(root):
    schemas = {}
    for path in sorted(root.glob("*.schema.json")):
        schemas[path.name] = json.loads(path.read_text())
    registry = Registry().with_resources(
        (name, Resource.from_contents(doc)) for name, doc in schemas.items())
    return schemas, registry


class Checker:
    def __init__(self, schemas, registry):
        self.schemas = schemas
        self.registry = registry
        self.checked = 0

    def doc(self, schema, document, where):
        validator = jsonschema.Draft202012Validator(self.schemas[schema], registry=self.registry)
        errors = sorted(validator.iter_errors(document), key=lambda e: list(e.path))
        if errors:
            raise SystemExit(f"{where}: {errors[0].message} at {list(errors[0].path)}")
        self.checked += 1

    def file(self, schema, path):
        self.doc(schema, json.loads(pathlib.Path(path).read_text()), path)

    def jsonl(self, schema, path):
        lines = pathlib.Path(path).read_text().splitlines()
        if not lines:
            raise SystemExit(f"{path}: empty")
        for n, line in enumerate(lines, 1):
            self.doc(schema, json.loads(line), f"{path}:{n}")
        return len(lines)


def run(cli, *args, expect=0):
    proc = subprocess.run([cli, *map(str, args)], capture_output=True, text=True)
    if proc.returncode != expect:
        raise SystemExit(f"{' '.join(map(str, args))} exited {proc.returncode}\n{proc.stderr}")
    return proc.stdout


def main():
    cli = sys.argv[1]
    schemas, registry = load_schemas(pathlib.Path(sys.argv[2]))
    check = Checker(schemas, registry)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        data, train = tmp / "data", tmp / "run"
        run(cli, "generate", "--out", data, "--identities", 3, "--images-per-identity", 3,
            "--val-per-identity", 1, "--image-size", 16)
        check.file("dataset_manifest.schema.json", data / "manifest.json")
        manifest = json.loads((data / "manifest.json").read_text())
        total = len(manifest["splits"]["train"]) + len(manifest["splits"]["val"])
        check.jsonl("parts_record.schema.json", data / "parts.jsonl")

        small = ["--set", "model.image_height=16", "--set", "model.image_width=16",
                 "--set", "model.num_patches=16", "--set", "model.patch_size=4",
                 "--set", "model.embed_dim=8", "--set", "model.mlp_dim=16",
                 "--set", "model.depth=1", "--set", "model.heads=2", "--set", "model.head_dim=4",
                 "--set", "model.landmark.channels=[4,8]", "--set", "batch_size=3",
                 "--set", "schedule.warmup_epochs=1"]
        run(cli, "train", "--data", data, "--out", train, "--epochs", 2, *small)
        check.file("train_config.schema.json", train / "config.json")
        check.file("train_summary.schema.json", train / "summary.json")
        check.file("checkpoint_manifest.schema.json", train / "checkpoint" / "manifest.json")
        with open(train / "metrics.csv", newline="") as f:
            rows = list(csv.reader(f))
        if rows[0] != ["epoch", "step", "lr", "loss", "train_acc"] or len(rows) != 3:
            raise SystemExit(f"metrics.csv: unexpected layout {rows[:1]} with {len(rows)} rows")
        for row in rows[1:]:
            int(row[0]), int(row[1]), *map(float, row[2:])

        ck = train / "checkpoint"
        emb, lms, att = tmp / "emb.jsonl", tmp / "lm.jsonl", tmp / "att"
        run(cli, "extract", "--checkpoint", ck, "--data", data, "--out", emb)
        run(cli, "landmarks", "--checkpoint", ck, "--data", data, "--out", lms)
        if check.jsonl("embedding_record.schema.json", emb) != total:
            raise SystemExit("embedding dump does not cover the dataset")
        if check.jsonl("landmark_record.schema.json", lms) != total:
            raise SystemExit("landmark dump does not cover the dataset")

        run(cli, "attention", "--checkpoint", ck, "--data", data, "--out", att, "--count", 2)
        check.file("attention_index.schema.json", att / "index.json")
        index = json.loads((att / "index.json").read_text())
        for entry in index["images"]:
            check.file("attention_dump.schema.json", att / entry["json"])
            dump = json.loads((att / entry["json"]).read_text())
            floats = sum(len(m["rows"]) * m["tokens"] for m in dump["maps"])
            if (att / entry["raw"]).stat().st_size != 4 * floats:
                raise SystemExit(f"{entry['raw']}: size does not match the JSON maps")

        metrics = tmp / "metrics"
        out = run(cli, "evaluate", "--data", data, "--embeddings", emb, "--landmarks", lms, "--out", metrics,
                  "--metric", "verification", "--metric", "rank1", "--metric", "overlap",
                  "--metric", "forward_error", "--pairs", 20, "--folds", 2,
                  "--patch-size", 4, "--image-size", 16)
        for n, line in enumerate(out.splitlines(), 1):
            check.doc("metric.schema.json", json.loads(line), f"stdout:{n}")
        for path in sorted(metrics.glob("*.json")):
            check.file("metric.schema.json", path)

        bad = tmp / "bad"
        run(cli, "train", "--data", data, "--out", bad, "--epochs", 1, *small,
            "--set", "schedule.base_lr=1e30", "--set", "schedule.warmup_epochs=0", expect=1)
        check.file("diagnostics.schema.json", bad / "diagnostics.json")
    print(f"validated {check.checked} documents")


if __name__ == "__main__":
    main()
