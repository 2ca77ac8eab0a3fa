"""Smoke test for the orsense Python module.

Build the module first:

    cargo build --release -p orsense-py --features extension-module

then run `python3 python/smoke_test.py`. The script copies the built shared
library next to a temp dir as `orsense.so` and imports it; set ORSENSE_LIB to
point at a different build.
"""

import json
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_orsense(tmp):
    lib = os.environ.get("ORSENSE_LIB")
    if not lib:
        for profile in ("release", "debug"):
            cand = os.path.join(ROOT, "target", profile, "liborsense.so")
            if os.path.exists(cand):
                lib = cand
                break
    if not lib:
        sys.exit("no built module found; run cargo build --release -p orsense-py --features extension-module")
    shutil.copy(lib, os.path.join(tmp, "orsense.so"))
    sys.path.insert(0, tmp)
    import orsense

    return orsense


def main():
    tmp = tempfile.mkdtemp()
    o = import_orsense(tmp)

    disc = o.Network.discovery(seed=1)
    assert disc.param_count() == 259810
    assert disc.layer_param_counts() == [3488, 18496, 36928, 200768, 130]
    assert o.Network.impact().layer_param_counts() == [1568, 8256, 2360320, 3075]
    assert disc.output_shape(4608, 4608) == [164, 164, 2]
    g = o.discovery_geometry(201, 201)
    assert (g["grid_rows"], g["stride"], g["receptive_field"]) == (1, 27, 215)
    assert len(o.plan_tiles(9216, 9216)) == 9
    assert len(o.plan_tiles(9216, 9216, overlap=0)) == 4

    mosaic, truth = o.synth_scene(json.dumps({"size": 400, "mines": 1, "seed": 3}))
    assert mosaic.height == 400 and len(mosaic.bands) == 12
    assert len(truth) == 1 and truth[0]["class"] == "mine"
    r, c = mosaic.geo_to_pixel(*mosaic.pixel_to_geo(17.0, 230.0))
    assert abs(r - 17.0) < 1e-9 and abs(c - 230.0) < 1e-9

    out, shape = disc.predict([0.0] * (201 * 201 * 12), 201, 201)
    assert shape == [1, 1, 2] and abs(sum(out) - 1.0) < 1e-5

    ds = os.path.join(tmp, "ds")
    counts = o.synth_dataset(ds, json.dumps({"discovery_mines": 10, "discovery_background": 10, "impact_per_class": 6}))
    assert counts["discovery"] == 20 and counts["impact"] == 18
    recs, errors = o.load_points(os.path.join(ds, "points.csv"))
    assert not errors and len(recs) == counts["points"]

    net, metrics, stats = o.train("discovery", os.path.join(ds, "discovery"), epochs=1, folds=2, seed=0)
    assert metrics["k"] == 2 and 0.0 <= metrics["accuracy"] <= 1.0
    assert len(stats["mean"]) == 12

    dets = o.detect(mosaic, net, stats, threshold=0.0)
    assert len(dets) == o.discovery_geometry(400, 400)["grid_rows"] ** 2
    csv_path = os.path.join(tmp, "d.csv")
    dets.export("csv", csv_path)
    back = o.Detections.load(csv_path)
    assert back.records() == dets.records()
    assert dets.to_kml().count("<Placemark>") == len(dets)

    try:
        o.Raster.read(os.path.join(tmp, "missing.tif"))
    except o.OrsenseError as e:
        assert str(e).startswith("io:")
    else:
        raise AssertionError("missing file did not raise")

    shutil.rmtree(tmp)
    print("python smoke test passed")


if __name__ == "__main__":
    main()
