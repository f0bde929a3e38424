#include "qbsde/cli.hpp"

int main(int argc, char** argv) { return qbsde::cli::run(argc, argv); }
