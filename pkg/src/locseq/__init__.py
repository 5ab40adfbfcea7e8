"""locseq: tools for text-serialized multi-object localization.

Submodules:
    codec       sequence grammar (serialize/parse, coordinate quantization)
    scoring     token-probability confidence scores for parsed detections
    evaluation  IoU, referring-expression accuracy, detection mAP, grounding
    dataset     four-scenario instruction dataset construction
    synth       seeded synthetic scenes, simulated traces, metric oracles
    cli         command-line front end
"""

__version__ = "0.1.0"
