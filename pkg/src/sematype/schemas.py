"""JSON Schemas for the CLI reports."""

_tag = {
    "type": "object",
    "required": ["thread", "loop", "nid", "rid", "size_class"],
    "properties": {
        "thread": {"type": "integer", "minimum": 0},
        "loop": {"type": "boolean"},
        "nid": {"type": "integer", "minimum": 0},
        "rid": {"type": "integer", "minimum": 0},
        "size_class": {"type": "integer", "minimum": 16},
    },
}

_counts = {"type": "object", "additionalProperties": {"type": "integer", "minimum": 0}}

ANALYZE = {
    "type": "object",
    "required": ["entry", "nodes", "sccs", "dag_nodes", "edge_kinds", "node_weights",
                 "site_weights", "dag_edges", "recurrent_sites", "prunable_edges",
                 "profile", "nid_capacity", "capacity_warning", "paths"],
    "properties": {
        "entry": {"type": "string"},
        "nodes": {"type": "array", "items": {"type": "string"}},
        "sccs": {"type": "array", "items": {
            "type": "object", "required": ["id", "members", "recursive"],
            "properties": {"id": {"type": "string"},
                           "members": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                           "recursive": {"type": "boolean"}}}},
        "dag_nodes": {"type": "array", "items": {"type": "string"}},
        "edge_kinds": {"type": "object", "additionalProperties": {
            "enum": ["plain", "inbound", "inner", "outbound"]}},
        "node_weights": _counts,
        "site_weights": _counts,
        "dag_edges": {"type": "array", "items": {
            "type": "object", "required": ["sites", "src", "dst", "in_loop", "weight"],
            "properties": {"sites": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                           "src": {"type": "string"}, "dst": {"type": "string"},
                           "in_loop": {"type": "boolean"},
                           "weight": {"type": "integer", "minimum": 0}}}},
        "recurrent_sites": {"type": "array", "items": {"type": "string"}},
        "prunable_edges": {"type": "array", "items": {"type": "string"}},
        "profile": {
            "type": "object",
            "required": ["n_sites", "paths_per_site", "scc_nodes_per_path", "k_loop_sites_any",
                         "k_loop_sites_all", "min_sematypes", "max_sematypes", "rid_bits",
                         "nid_bits", "capacity_warning"],
            "properties": {
                "n_sites": {"type": "integer", "minimum": 0},
                "paths_per_site": _counts,
                "scc_nodes_per_path": {"type": "object", "additionalProperties": {
                    "type": "array", "items": {"type": "integer", "minimum": 0}}},
                "k_loop_sites_any": {"type": "integer", "minimum": 0},
                "k_loop_sites_all": {"type": "integer", "minimum": 0},
                "min_sematypes": {"type": "integer", "minimum": 0},
                "max_sematypes": {"type": "integer", "minimum": 0},
                "rid_bits": {"type": "integer"},
                "nid_bits": {"type": "integer"},
                "capacity_warning": {"type": "boolean"},
            },
        },
        "nid_capacity": {"type": "integer"},
        "capacity_warning": {"type": "boolean"},
        "paths": {"oneOf": [{"type": "null"}, {"type": "array", "items": {
            "type": "object", "required": ["site", "sites", "nid", "recursive"],
            "properties": {"site": {"type": "string"},
                           "sites": {"type": "array", "items": {"type": "string"}},
                           "nid": {"type": "integer", "minimum": 0},
                           "recursive": {"type": "boolean"}}}}]},
    },
}

_stat_keys = ["allocs", "frees", "reuses", "huge_allocs", "recurrent_allocs", "recurrent_pools",
              "recurrent_pct", "avg_allocs_per_recurrent_pool", "leak_bytes", "leak_pct",
              "peak_virtual", "peak_resident", "distinct_sematypes", "regular_allocs",
              "deferred_frees", "pending_deferred", "one_time_reissued"]

REPLAY = {
    "type": "object",
    "required": ["verdict", "stats", "census", "violations", "diagnostics"],
    "properties": {
        "verdict": {"enum": ["pass", "fail"]},
        "stats": {"type": "object", "required": _stat_keys,
                  "additionalProperties": {"type": "number", "minimum": 0}},
        "census": {"type": "object", "required": ["alloc_sites", "sematypes", "per_site"],
                   "properties": {"alloc_sites": {"type": "integer"},
                                  "sematypes": {"type": "integer"},
                                  "per_site": _counts}},
        "violations": {"type": "array", "items": {"type": "string"}},
        "diagnostics": {"type": "array", "items": {"type": "string"}},
    },
}

CHECK_UAF = {
    "type": "object",
    "required": ["dangling", "attackers"],
    "properties": {
        "dangling": {"type": "object", "required": ["object", "tag", "address"],
                     "properties": {"object": {"type": "string"}, "tag": _tag,
                                    "address": {"type": "integer"}}},
        "attackers": {"type": "object", "additionalProperties": {
            "type": "object", "required": ["verdict", "tag", "address"],
            "properties": {"verdict": {"enum": ["blocked", "overlap"]}, "tag": _tag,
                           "address": {"type": "integer"}}}},
    },
}
