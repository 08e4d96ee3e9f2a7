int md_placeholder_test_harness;
