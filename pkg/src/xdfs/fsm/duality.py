"""Structural duality check between the download and upload machines.

The data plane of the sending server corresponds one-to-one with the
sending client of the other mode, and likewise for the two receivers.
The checker compares transition-table signatures (rest state, event
type, handler label, declared action kinds, declared successor states)
under a phase-name bijection and reports every unmatched or differing
transition.
"""

from __future__ import annotations

from dataclasses import dataclass

from .machines import MachineSpec


@dataclass
class DualityReport:
    pair: tuple[str, str]
    matched: int
    mismatches: list[str]

    @property
    def ok(self) -> bool:
        return not self.mismatches

    def __str__(self) -> str:
        status = "ok" if self.ok else f"{len(self.mismatches)} mismatch(es)"
        return f"duality {self.pair[0]} <-> {self.pair[1]}: {self.matched} matched, {status}"


def _signatures(spec: MachineSpec, phase_map: dict[str, str]) -> dict:
    out = {}
    for (phase, event_type), rule in spec.table.items():
        name = phase.value
        if name not in spec.data_plane:
            continue
        key = (phase_map.get(name, name), event_type.__name__)
        out[key] = (
            rule.label,
            tuple(sorted(t.__name__ for t in rule.emits)),
            tuple(sorted(phase_map.get(g, g) for g in rule.goes)),
        )
    return out


def check_duality(
    spec_a: MachineSpec,
    spec_b: MachineSpec,
    phase_map: dict[str, str] | None = None,
) -> DualityReport:
    """Verify the fixed data-plane bijection between two machines.

    phase_map renames spec_a's phases into spec_b's; the shipped machines
    share data-plane phase names, so the default identity map applies.
    """
    mapping = phase_map or {}
    sig_a = _signatures(spec_a, mapping)
    sig_b = _signatures(spec_b, {})
    mismatches: list[str] = []
    matched = 0
    for key in sorted(set(sig_a) | set(sig_b)):
        in_a, in_b = key in sig_a, key in sig_b
        if in_a and not in_b:
            mismatches.append(f"{key[0]}/{key[1]}: only in {spec_a.name}")
        elif in_b and not in_a:
            mismatches.append(f"{key[0]}/{key[1]}: only in {spec_b.name}")
        elif sig_a[key] != sig_b[key]:
            mismatches.append(
                f"{key[0]}/{key[1]}: {spec_a.name} has {sig_a[key]}, "
                f"{spec_b.name} has {sig_b[key]}"
            )
        else:
            matched += 1
    return DualityReport((spec_a.name, spec_b.name), matched, mismatches)
