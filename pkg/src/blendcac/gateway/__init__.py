"""HTTP service, command line tool and benchmark harness."""
