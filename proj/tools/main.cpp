#include "headprobe_cli.hpp"

int main(int argc, char** argv) { return headprobe::cli::run(argc, argv); }
