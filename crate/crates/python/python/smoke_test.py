"""Smoke test for the `novelty` extension module.

Build first, e.g. `maturin develop` in crates/python, or
`cargo build -p novelty-py --release` and copy target/release/libnovelty.so
to a directory on PYTHONPATH as novelty.so.
"""

import json
import pathlib
import sys
import tempfile

import novelty

ROOT = pathlib.Path(__file__).resolve().parents[3]
DEMO = ROOT / "fixtures" / "demo"


def main():
    doc = "Each register stores the maximum observed rank together with the arrival epoch of the item."
    hit = novelty.verify_quote("maximum observed rank together with the arrival", doc)
    assert hit["found"] and hit["match_score"] == 1.0, hit
    miss = novelty.verify_quote("completely unrelated sentence about gardening tools", doc)
    assert not miss["found"], miss

    assert novelty.quality_flag([("topic", "support"), ("time", "support")]) == "perfect"
    assert novelty.quality_flag([("topic", "somewhat_support")]) == "partial"
    assert novelty.quality_flag([("topic", "reject"), ("time", "support")]) == "no"

    cid = novelty.CanonicalId("doi:10.5555/demo.0001")
    assert (cid.scheme, cid.value) == ("doi", "10.5555/demo.0001")
    assert novelty.CanonicalId.from_title("A Title").scheme == "title-hash"
    try:
        novelty.CanonicalId("nonsense")
    except ValueError:
        pass
    else:
        raise AssertionError("bad id accepted")

    tax = {
        "name": "Topic Survey Taxonomy",
        "subtopics": [
            {"name": "A", "papers": ["p1", "p2", "ghost"]},
            {"name": "B", "papers": ["p2"]},
        ],
    }
    report = novelty.validate_taxonomy(tax, {"p1", "p2", "p3"})
    assert not report["is_valid"]
    assert report["extra_ids"] == ["ghost"] and report["duplicate_ids"] == ["p2"]
    fixed = novelty.Taxonomy(tax).repaired({"p1", "p2", "p3"})
    after = fixed.validate({"p1", "p2", "p3"})
    assert after["extra_ids"] == [] and after["duplicate_ids"] == [] and after["missing_ids"] == ["p3"]

    with tempfile.TemporaryDirectory() as out:
        manifest = novelty.run_pipeline(
            str(DEMO / "paper.json"),
            out,
            str(DEMO / "llm.json"),
            str(DEMO / "search.json"),
            generated_at="2026-01-01T00:00:00Z",
            concurrency=4,
        )
        assert [p["status"] for p in manifest["phases"]] == ["completed"] * 4, manifest
        produced = pathlib.Path(manifest["phases"][3]["artifact"]).read_text()

    golden = novelty.Report.load(str(DEMO / "golden" / "phase3_complete_report.json"))
    assert golden.render_markdown() == (DEMO / "golden" / "report.md").read_text()
    assert produced == (DEMO / "golden" / "report.md").read_text()
    assert golden.taxonomy().depth() >= 1
    assert golden.output_filename().startswith("novelty_report_")
    roundtrip = novelty.Report(json.dumps(golden.to_dict()))
    assert roundtrip.title == golden.title

    print("python smoke test: ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
