#include "egspo/harness.hpp"

int main(int argc, char** argv) { return egspo::run_cli(argc, argv); }
