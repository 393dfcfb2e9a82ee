def pytest_runtest_logreport(report):
    # one visible pass/fail line per acceptance criterion
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        outcome = "PASSED" if report.passed else "FAILED"
        print(f"\nACCEPTANCE {name}: {outcome} ({report.duration:.1f}s)", flush=True)
