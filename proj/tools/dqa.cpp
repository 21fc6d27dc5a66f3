// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "dqa/cli.hpp"

int main(int argc, char** argv) { return dqa::run_cli(argc, argv, std::cout, std::cerr); }
