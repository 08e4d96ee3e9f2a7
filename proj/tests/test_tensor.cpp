int md_placeholder_test_tensor;
