int md_placeholder_test_planner;
