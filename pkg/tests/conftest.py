"""Shared pytest plumbing: prints one pass/fail line per acceptance
criterion in the terminal summary."""

CRITERIA = {
    "test_criterion_01": "1 gradient integrity (ops + composite < 1e-4)",
    "test_criterion_02": "2 split fidelity (457/114/63 and 960/239/133)",
    "test_criterion_03": "3 memorization (training MCD < 0.5 dB)",
    "test_criterion_04": "4 decoding vs chance (PCC/F1 > 0.8, MW p < 0.005)",
    "test_criterion_05": "5 CLIP retrieval 100% and closed form 2 log K",
    "test_criterion_06": "6 ablation ordering ViT+CLIP >= ViT >= CNN",
    "test_criterion_07": "7 contamination calibration (KS, -20 dB, Bonferroni)",
    "test_criterion_08": "8 DTW equals exhaustive minimum (1000 cases)",
    "test_criterion_09": "9 saliency localization (>= 80% mass, SmoothGrad)",
    "test_criterion_10": "10 rank tests match enumeration (500 instances)",
    "test_criterion_11": "11 determinism (byte-identical cv reports)",
}


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = getattr(rep, "nodeid", "")
            for key, label in CRITERIA.items():
                if key in name:
                    status = "PASS" if outcome == "passed" else "FAIL"
                    lines.append((label, status))
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for label, status in sorted(lines):
            terminalreporter.write_line(f"{status} criterion {label}")
