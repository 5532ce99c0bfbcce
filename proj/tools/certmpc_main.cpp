#include <certmpc/cli.hpp>

int main(int argc, char** argv) { return certmpc::cli::run(argc, argv); }
