#include "msg/cli.hpp"

int main(int argc, char** argv) { return msg::cli::run_cli(argc, argv); }
