"""Cluster free-form tag strings into canonical names with k-means."""

from tagpr.clients import TAG_VARIANTS
from tagpr.pipeline import PipelineRecord, cluster_tags, derive_primary_tags, normalize_tag

records = []
for i, variants in enumerate(TAG_VARIANTS.values()):
    r = PipelineRecord(f"t{i}", "classification", "u", "q", [], "label_0", "")
    r.exploratory_tags = [normalize_tag(v) for v in variants] + [normalize_tag(variants[1])]
    records.append(r)
clusters = cluster_tags(records, k=len(TAG_VARIANTS), seed=0)
print("inertia trace:", [round(x, 3) for x in clusters.inertia_trace])
for c in sorted(set(clusters.assignments)):
    print(c, [t for t, a in zip(clusters.tags, clusters.assignments) if a == c])
print("registry:", derive_primary_tags(clusters, records).names)
