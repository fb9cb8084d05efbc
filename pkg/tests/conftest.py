def pytest_terminal_summary(terminalreporter):
    # Acceptance lines are printed inside the tests; repeat them here so they
    # show up without -s.
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results):
            terminalreporter.write_line(results[key])
