"""Shared pytest configuration.

The acceptance suite (tests/test_acceptance.py) gets one summary line
per criterion at the end of the run, independent of verbosity, so the
overall verdict is readable at a glance.
"""

ACCEPTANCE_LABELS = {
    "test_a1_fusion_equivalence_and_memory_gap": "A1 fused/baseline equivalence + peak-memory separation",
    "test_a2_memory_scaling_law": "A2 peak-gap doubles with batch size (O(BNK) vs O(NK))",
    "test_a3_search_feasibility_and_cost": "A3 search feasibility and modeled-cost reduction",
    "test_a4_search_oracle_tiny_graphs": "A4 exhaustive tiny-graph oracle + greedy-trace consistency",
    "test_a5_training_parity": "A5 mixed-precision training parity within 1.0 dB",
    "test_a6_homogeneous_ordering": "A6 homogeneous-precision PSNR ordering",
    "test_a7_probe_seed_independence": "A7 probe-seed independence of the precision map",
    "test_a8_numerics_oracle": "A8 bit-level rounding + relative-error oracle",
    "test_a9_conjugate_update_oracle": "A9 conjugate accumulation + responsibility oracle",
}


def pytest_configure(config):
    # Measured values the acceptance tests record (orderings, agreement
    # fractions, divergence frames); flushed after the criteria lines.
    config._acceptance_records = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = []
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = getattr(rep, "location", ("", "", ""))[2]
            base = name.split("[")[0]
            if base in ACCEPTANCE_LABELS and rep.when in ("call", "setup"):
                verdict = {"passed": "PASS", "failed": "FAIL",
                           "error": "FAIL", "skipped": "SKIP"}[outcome]
                lines.append((base, f"[{verdict}] {ACCEPTANCE_LABELS[base]}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(set(lines)):
            terminalreporter.write_line(line)
    records = getattr(config, "_acceptance_records", [])
    if records:
        terminalreporter.section("acceptance records")
        for line in records:
            terminalreporter.write_line(line)
