"""Builds coco_oracle.json (in the working directory): a random fixture
scored with pycocotools.

Every class has ground truth in every size bucket, so the reference and the
crate agree on which (class, bucket) cells are excluded. Bucket edges are
made half-open by using integer areas.
"""
import json
import random

import numpy as np
from pycocotools.coco import COCO
from pycocotools.cocoeval import COCOeval

rng = random.Random(20240611)
W = H = 1000
classes = [1, 2, 3]
images = [{"id": i, "file_name": f"img{i}.png", "width": W, "height": H} for i in range(1, 7)]
anns, dets = [], []
sizes = {"small": (4, 30), "medium": (33, 90), "large": (97, 200)}


def rand_box(lo, hi):
    w, h = rng.randint(lo, hi), rng.randint(lo, hi)
    return [rng.randint(0, W - w), rng.randint(0, H - h), w, h]


for img in images:
    for c in classes:
        for bucket, (lo, hi) in sizes.items():
            for _ in range(rng.randint(0, 3) if img["id"] > 1 else 1):
                b = rand_box(lo, hi)
                anns.append({"id": len(anns) + 1, "image_id": img["id"], "category_id": c,
                             "bbox": b, "area": b[2] * b[3], "iscrowd": 0})
for a in anns:
    x, y, w, h = a["bbox"]
    for _ in range(rng.choice([0, 1, 1, 1, 2])):
        j = max(1, int(0.15 * min(w, h)))
        nx, ny = max(0, x + rng.randint(-j, j)), max(0, y + rng.randint(-j, j))
        nw, nh = max(1, w + rng.randint(-j, j)), max(1, h + rng.randint(-j, j))
        nw, nh = min(nw, W - nx), min(nh, H - ny)
        c = a["category_id"] if rng.random() > 0.1 else rng.choice(classes)
        dets.append({"image_id": a["image_id"], "category_id": c, "bbox": [nx, ny, nw, nh],
                     "score": round(rng.random(), 2)})
for img in images:
    for _ in range(rng.randint(2, 6)):
        lo, hi = rng.choice(list(sizes.values()))
        dets.append({"image_id": img["id"], "category_id": rng.choice(classes),
                     "bbox": rand_box(lo, hi), "score": round(rng.random(), 2)})

gt_doc = {"images": images, "annotations": anns,
          "categories": [{"id": c, "name": f"class{c}"} for c in classes]}
gt = COCO()
gt.dataset = json.loads(json.dumps(gt_doc))
gt.createIndex()
dt = gt.loadRes(json.loads(json.dumps(dets)))
ev = COCOeval(gt, dt, "bbox")
ev.params.maxDets = [2000]
big = 1e10
ev.params.areaRng = [[0, big], [0, 1023], [1024, 9215], [9216, big]]
ev.evaluate()
ev.accumulate()
p = ev.eval["precision"]  # [T, R, K, A, M]


def mean_valid(a):
    a = a[a > -1]
    return float(np.mean(a)) if a.size else None


expected = {
    "map_50_95": mean_valid(p[:, :, :, 0, 0]),
    "map_50": mean_valid(p[0, :, :, 0, 0]),
    "map_50_small": mean_valid(p[0, :, :, 1, 0]),
    "map_50_medium": mean_valid(p[0, :, :, 2, 0]),
    "map_50_large": mean_valid(p[0, :, :, 3, 0]),
    "per_class_ap_50": {str(c): mean_valid(p[0, :, k, 0, 0]) for k, c in enumerate(classes)},
    "per_class_ap_50_95": {str(c): mean_valid(p[:, :, k, 0, 0]) for k, c in enumerate(classes)},
}
with open("coco_oracle.json", "w") as f:
    json.dump({"dataset": gt_doc, "detections": dets, "expected": expected}, f, indent=1)
