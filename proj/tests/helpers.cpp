// Helper executables for the multi-process tests, selected by argv[0] mode:
//   actor <ns>              line-driven Actor on stdin/stdout
//   hold <ns> <var>         view var, print "ready", wait for a line, verify, release
//   orphan <ns> <var> <n>   register var with n values, print "ready", sleep until killed

#include <cstring>
#include <iostream>
#include <string>
#include <vector>

#include <unistd.h>

#include "shmkit/registry.hpp"
#include "shmkit/log.hpp"
#include "support/actor.hpp"

int main(int argc, char** argv)
{
    if (argc < 3) return 2;
    const std::string mode = argv[1];
    const std::string ns = argv[2];
    std::cout.setf(std::ios::unitbuf);

    if (mode == "actor") {
        // deferred releases are routine here
        shmkit::log::set_sink([](shmkit::log::Level level, const std::string& msg) {
            if (level == shmkit::log::Level::error) std::cerr << msg << "\n";
        });
        testing::Actor actor(ns);
        std::string line;
        while (std::getline(std::cin, line)) {
            std::cout << actor.execute(line) << std::endl;
            if (line == "quit") break;
        }
        return 0;
    }
    if (mode == "hold" && argc >= 4) {
        shmkit::Registry reg;
        try {
            auto view = reg.retrieve_view(ns, argv[3]);
            std::cout << "ready " << view.size() << std::endl;
            std::string line;
            std::getline(std::cin, line);
            double sum = 0.0;
            for (double v : view.values()) sum += v;
            std::cout << "sum " << sum << std::endl;
            std::getline(std::cin, line);
            reg.release_views(ns, {argv[3]});
            std::cout << "released" << std::endl;
        } catch (const std::exception& e) {
            std::cout << "error " << e.what() << std::endl;
            return 1;
        }
        return 0;
    }
    if (mode == "orphan" && argc >= 5) {
        shmkit::Registry reg;
        std::vector<double> v(std::stoul(argv[4]), 1.5);
        reg.register_variables(ns, {{argv[3], shmkit::VariableRef::of_vector(v)}});
        std::cout << "ready" << std::endl;
        while (true) ::pause();
    }
    return 2;
}
