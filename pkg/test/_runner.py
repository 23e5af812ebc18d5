"""Script-mode runner shared by the test files (pytest collects the test functions directly)."""

import traceback


def run_tests(title: str, tests) -> int:
    """Run test callables (or (name, callable) pairs) and print a ✓/✗ line for each."""
    print("\n" + "╔" + "=" * 58 + "╗")
    print("║" + title.center(58) + "║")
    print("╚" + "=" * 58 + "╝")
    failed = 0
    for test in tests:
        name, test = test if isinstance(test, tuple) else (test.__name__, test)
        try:
            test()
            print(f"   ✓ {name}")
        except Exception as e:
            failed += 1
            print(f"   ✗ {name}: {type(e).__name__}: {e}")
            traceback.print_exc()
    print("\n" + "=" * 60)
    if failed:
        print(f"❌ {failed} of {len(tests)} tests failed")
        return 1
    print(f"✅ All {len(tests)} tests passed!")
    return 0
