"""A full confidential federated session in one process.

Spins up the policy manager with its counter service, a coordinator, and
three clients, all talking over mutually attested channels, and watches
what actually crosses the wire and the disk.

Run with: python demos/05_federated_session.py
"""

import tempfile

from fedshield import verify_audit
from fedshield.audit import read_entries
from fedshield.demo import run_demo, scan_capture, scan_tree
from fedshield.transport import CaptureLog

capture = CaptureLog()
with tempfile.TemporaryDirectory() as workdir:
    result = run_demo(workdir, num_clients=3, rows_per_client=200, dim=8,
                      seed=7, capture=capture)

    print("policy:", result.policy_hash.hex()[:16], "...")
    print("rounds run:", result.model.round_index)
    for round_index, accuracy, loss in result.model.history:
        print(f"  round {round_index}: accuracy={accuracy:.4f} loss={loss:.4f}")

    # Both services keep hash-chained audit logs; the chains verify from
    # genesis and localize any tamper to an exact entry.
    for name, path in result.audit_paths.items():
        verdict = verify_audit(path)
        print(f"audit[{name}]: {verdict.entries} entries, ok={verdict.ok}")

    kinds = [e.kind for e in read_entries(result.audit_paths["coordinator"])]
    print("coordinator audit kinds:", kinds)

    # The demo tracked every sensitive byte pattern it created: dataset
    # rows, serialized client updates, released keys. None of them may
    # appear in the wire capture or anywhere in persisted storage.
    print("\nsensitive patterns tracked:", len(result.sensitive))
    print("wire frames captured:", len(capture.frames()))
    print("wire scan findings:", scan_capture(capture, result.sensitive))
    print("storage scan findings:", scan_tree(workdir, result.sensitive))
