int md_placeholder_test_nn;
